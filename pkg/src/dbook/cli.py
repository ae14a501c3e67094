"""Command-line experiment runner: ``train``, ``eval``, ``sensitivity`` and ``explain``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .coevolve import COEVOLUTION_COLUMNS, CURVE_COLUMNS, StatePool, build_ensemble, train
from .config import (
    Checkpoint,
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    load_checkpoint,
    load_config,
    save_checkpoint,
    save_config,
)
from .evalbench import (
    DEFAULT_DELTAS,
    RESULTS_COLUMNS,
    SENSITIVITY_COLUMNS,
    LearnedPolicy,
    default_baselines,
    evaluate_policy,
    pareto_front,
    run_episode,
    sensitivity_sweep,
)
from .explain import ATTRIBUTION_COLUMNS, summarize_policy
from .noshow import NoShowPredictor
from .simenv import SchedulingEnv

log = logging.getLogger("dbook")

PARETO_COLUMNS = ("policy", "u_bar", "d_bar", "b_bar")
BACKGROUND_SIZE = 256


class CliError(Exception):
    pass


def write_csv(path, columns: Sequence[str], rows: Sequence[dict], append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        if fresh:
            w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _starmap(fn, arg_tuples, threads: int) -> list:
    """Run ``fn`` over argument tuples, in worker processes when threads > 1; order is kept."""
    if threads <= 1:
        return [fn(*a) for a in arg_tuples]
    with ProcessPoolExecutor(threads) as ex:
        return list(ex.map(fn, *zip(*arg_tuples)))


def member_label(i: int) -> str:
    return f"MPPPO {i + 1}"


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "episodes", None) is not None:
        cfg.ppo = dataclasses.replace(cfg.ppo, episodes_per_epoch=args.episodes)
    if getattr(args, "arrival_rate", None) is not None:
        cfg.sim = dataclasses.replace(cfg.sim, arrival_rate=args.arrival_rate)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


# -- subcommands ----------------------------------------------------------------

def run_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start, pool = 1, None
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint, expect=cfg)
        ensemble, pool, start = ck.ensemble, ck.pool, ck.next_epoch
        log.info("resuming at epoch %d", start)
    else:
        ensemble = build_ensemble(cfg.weights, cfg.seed, cfg.ppo)
    resumed = start > 1
    save_config(cfg, out / "config.json")
    write_csv(out / "curves.csv", CURVE_COLUMNS, [], append=resumed)
    write_csv(out / "coevolution.csv", COEVOLUTION_COLUMNS, [], append=resumed)
    (out / "INCOMPLETE").unlink(missing_ok=True)

    def on_epoch(epoch, curve_rows, co_rows):
        write_csv(out / "curves.csv", CURVE_COLUMNS, curve_rows, append=True)
        write_csv(out / "coevolution.csv", COEVOLUTION_COLUMNS, co_rows, append=True)

    try:
        ensemble, pool, _, _ = train(ensemble, cfg.epochs, cfg.seed, cfg.sim, cfg.predictor, cfg.ppo,
                                     cfg.coevolution, pool=pool, start_epoch=start, threads=args.threads,
                                     on_epoch=on_epoch)
    except Exception as e:
        (out / "INCOMPLETE").write_text(f"training failed: {e!r}\n")
        raise
    save_checkpoint(Checkpoint(cfg, ensemble, pool or StatePool(cfg.coevolution.kl_sample_size),
                               max(start, cfg.epochs + 1)), out / "checkpoint.json")
    return 0


def _load(args) -> Checkpoint:
    expect = load_config(args.config) if args.config else None
    if expect is not None and args.seed is not None:
        expect.seed = args.seed
    return load_checkpoint(args.checkpoint, expect=expect)


def _out_dir(args, ck: Checkpoint) -> Path:
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_seed(args, ck: Checkpoint) -> int:
    return ck.config.seed if args.eval_seed is None else args.eval_seed


def run_eval(args) -> int:
    ck = _load(args)
    cfg, out = ck.config, _out_dir(args, ck)
    seed = _eval_seed(args, ck)
    jobs = [(LearnedPolicy(member_label(i), m.actor), args.episodes, seed, m.weights, cfg.sim, cfg.predictor)
            for i, m in enumerate(ck.ensemble.members)]
    if args.baselines:
        jobs += [(b, args.episodes, seed, None, cfg.sim, cfg.predictor) for b in default_baselines()]
    reports = _starmap(evaluate_policy, jobs, args.threads)
    members = reports[:len(ck.ensemble)]
    write_csv(out / "results.csv", RESULTS_COLUMNS, [r.row() for r in reports])
    usable = [r for r in members if not r.flagged]
    front = pareto_front(usable, key=lambda r: tuple(-1.0 if v is None else v for v in r.objectives))
    write_csv(out / "pareto.csv", PARETO_COLUMNS,
              [{"policy": r.label, "u_bar": r.u_bar, "d_bar": r.d_bar, "b_bar": r.b_bar} for r in front])
    if args.event_log:
        env = SchedulingEnv(cfg.sim, NoShowPredictor(cfg.predictor), log_events=True)
        member = ck.ensemble.members[_member_index(args.member, ck)]
        run_episode(LearnedPolicy("log", member.actor), env, seeding.eval_seeds(seed, 1)[0])
        env.write_event_log(args.event_log)
    return 0


def run_sensitivity(args) -> int:
    ck = _load(args)
    cfg, out = ck.config, _out_dir(args, ck)
    deltas = sorted(set(args.deltas) | {0.0})
    for d in deltas:
        if not -1.0 <= d <= 1.0:
            raise CliError(f"delta {d} outside [-1, 1]")
    members = ck.ensemble.members
    jobs = [([LearnedPolicy(member_label(i), m.actor)], [m.weights], deltas, args.episodes,
             _eval_seed(args, ck), cfg.sim, cfg.predictor) for i, m in enumerate(members)]
    rows = [r for part in _starmap(sensitivity_sweep, jobs, args.threads) for r in part]
    write_csv(out / "sensitivity.csv", SENSITIVITY_COLUMNS, rows)
    return 0


def _member_index(member: int, ck: Checkpoint) -> int:
    if not 0 <= member < len(ck.ensemble):
        raise CliError(f"member {member} out of range 0..{len(ck.ensemble) - 1}")
    return member


def run_explain(args) -> int:
    ck = _load(args)
    cfg, out = ck.config, _out_dir(args, ck)
    idx = _member_index(args.member, ck)
    actions = [0, 1] if args.action is None else [args.action]
    for a in actions:
        if a not in (0, 1):
            raise CliError("attribution covers action 0 (single-book) and 1 (double-book) only")
    actor = ck.ensemble.members[idx].actor
    observed: list = []
    seed = _eval_seed(args, ck)
    evaluate_policy(LearnedPolicy("explain", actor), 1, seed, None, cfg.sim, cfg.predictor, obs_sink=observed)
    obs = np.asarray(observed)
    rng = seeding.child_rng(seed, seeding.EXPLAIN, idx)
    background = obs[rng.choice(len(obs), size=min(BACKGROUND_SIZE, len(obs)), replace=False)]
    instances = obs[rng.choice(len(obs), size=min(args.samples, len(obs)), replace=False)]
    for a in actions:
        write_csv(out / f"attribution_action{a}.csv", ATTRIBUTION_COLUMNS,
                  summarize_policy(actor, instances, background, a))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbook", description="Multi-policy PPO for outpatient double-booking")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the policy ensemble")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--episodes", type=int, help="episodes per epoch")
    t.add_argument("--lambda", dest="arrival_rate", type=float, help="daily arrival rate")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=run_train)

    def frozen(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", help="refuse to run unless the checkpoint matches this config")
        s.add_argument("--out")
        s.add_argument("--seed", dest="eval_seed", type=int, help="evaluation seed (default: master seed)")
        s.add_argument("--episodes", type=int, default=5)
        s.add_argument("--threads", type=int, default=1)
        s.set_defaults(func=func, seed=None)
        return s

    e = frozen("eval", run_eval, "evaluate members and baselines")
    e.add_argument("--baselines", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--event-log", help="write the event log of one evaluation episode here")
    e.add_argument("--member", type=int, default=0, help="member used for the event log")

    s = frozen("sensitivity", run_sensitivity, "no-show probability perturbation sweep")
    s.add_argument("--deltas", type=float, nargs="+", default=[d for d in DEFAULT_DELTAS if d != 0.0])

    x = frozen("explain", run_explain, "Shapley attribution of one member's action probabilities")
    x.add_argument("--member", type=int, default=0)
    x.add_argument("--action", type=int, help="0 or 1; both when omitted")
    x.add_argument("--samples", type=int, default=64, help="instances to attribute")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CliError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
