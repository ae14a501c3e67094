"""Experiment configuration and checkpoint persistence (JSON)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .approximator import AdamState, NetworkParams
from .coevolve import CoEvolutionConfig, Member, PolicyEnsemble, StatePool
from .domain import DEFAULT_WEIGHT_TABLE, WeightVector
from .noshow import PredictorConfig
from .ppo import PpoConfig
from .simenv import SimConfig

FORMAT_VERSION = 1
SEED_SCHEME = "SeedSequence(master, spawn_key=(stream, *path))"

_SECTIONS = {"sim": SimConfig, "predictor": PredictorConfig, "ppo": PpoConfig,
             "coevolution": CoEvolutionConfig}
# run-length and location do not change what a given epoch computes
_UNFINGERPRINTED = ("epochs", "output_dir")


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    coevolution: CoEvolutionConfig = field(default_factory=CoEvolutionConfig)
    weights: list = field(default_factory=lambda: [list(r) for r in DEFAULT_WEIGHT_TABLE])
    epochs: int = 250
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        try:
            self.sim.validate()
            self.predictor.validate()
            self.ppo.validate()
            if len(self.weights) < 2:
                raise ValueError("weight table needs at least two rows")
            for row in self.weights:
                if len(row) != 3:
                    raise ValueError(f"weight row {row} must have three entries")
                WeightVector(*map(float, row))
            self.coevolution.validate(len(self.weights))
            if self.epochs < 0:
                raise ValueError("epochs must be >= 0")
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e

    def weight_vectors(self) -> list[WeightVector]:
        return [WeightVector(*map(float, r)) for r in self.weights]

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out.update(weights=[[float(x) for x in r] for r in self.weights], epochs=self.epochs,
                   output_dir=self.output_dir, seed=self.seed)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(_SECTIONS) | {"weights", "epochs", "output_dir", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, klass in _SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = klass(**sec)
        for k in ("weights", "epochs", "output_dir", "seed"):
            if k in d:
                kwargs[k] = d[k]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def fingerprint(self) -> str:
        d = self.to_dict()
        for k in _UNFINGERPRINTED:
            d.pop(k)
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ExperimentConfig
    ensemble: PolicyEnsemble
    pool: StatePool
    next_epoch: int

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _member_to_dict(m: Member) -> dict:
    return {
        "index": m.index,
        "weights": list(m.weights.as_array().tolist()),
        "epoch": m.epoch,
        "actor": m.actor.to_nested(),
        "critic": m.critic.to_nested(),
        "actor_opt": m.actor_opt.to_dict(),
        "critic_opt": m.critic_opt.to_dict(),
        "recent_components": None if m.recent_components is None else m.recent_components.tolist(),
    }


def _member_from_dict(d: dict) -> Member:
    rc = d["recent_components"]
    return Member(
        index=int(d["index"]), weights=WeightVector(*d["weights"]),
        actor=NetworkParams.from_nested(d["actor"]), critic=NetworkParams.from_nested(d["critic"]),
        actor_opt=AdamState.from_dict(d["actor_opt"]), critic_opt=AdamState.from_dict(d["critic_opt"]),
        epoch=int(d["epoch"]), recent_components=None if rc is None else np.asarray(rc, dtype=np.float64),
    )


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "fingerprint": ck.fingerprint,
        # the output location is a property of the run, not of the trained state
        "config": {k: v for k, v in ck.config.to_dict().items() if k != "output_dir"},
        "rng": {"scheme": SEED_SCHEME, "master_seed": ck.config.seed, "next_epoch": ck.next_epoch},
        "members": [_member_to_dict(m) for m in ck.ensemble.members],
        "state_pool": ck.pool.to_dict(),
    }


def save_checkpoint(ck: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(canonical_json(checkpoint_to_dict(ck)))
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path, expect: Optional[ExperimentConfig] = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` (if given) must share its fingerprint."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(data, dict) or "format_version" not in data:
        raise CorruptCheckpoint("checkpoint lacks format_version")
    if data["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {data['format_version']}, expected {FORMAT_VERSION}")
    try:
        cfg = ExperimentConfig.from_dict(data["config"])
        members = [_member_from_dict(m) for m in data["members"]]
        pool = StatePool.from_dict(data["state_pool"])
        next_epoch = int(data["rng"]["next_epoch"])
        stored = data["fingerprint"]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpoint(f"malformed checkpoint: {e!r}") from e
    if stored != cfg.fingerprint():
        raise FingerprintMismatch("stored fingerprint does not match the embedded config")
    if expect is not None and expect.fingerprint() != stored:
        raise FingerprintMismatch("checkpoint was produced by a different configuration")
    return Checkpoint(cfg, PolicyEnsemble(members), pool, next_epoch)
