"""Multi-policy PPO ensemble with KL-adaptive co-evolution.

Each member optimises its own scalarisation of (utilization, double-show
avoidance, attendance balance). Every ``period`` epochs a member may pull its
parameters toward the best-performing neighbour in weight space, by an amount
that shrinks with the KL divergence between the two policies.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .approximator import (
    HIDDEN,
    AdamState,
    NetworkParams,
    actor_sizes,
    critic_sizes,
    forward_policy,
    init_params,
    soft_blend,
)
from .domain import DEFAULT_WEIGHT_TABLE, OBS_DIM, ContractError, WeightVector
from .noshow import NoShowPredictor, PredictorConfig
from .ppo import PpoConfig, collect_rollout, ppo_update
from .simenv import SchedulingEnv, SimConfig

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12

CURVE_COLUMNS = ("epoch", "policy_id", "mean_shaped_total_reward", "policy_loss", "value_loss",
                 "entropy", "clip_fraction")
COEVOLUTION_COLUMNS = ("epoch", "p", "q_star", "kl", "tau", "transferred", "return_p", "return_qstar")


@dataclass
class CoEvolutionConfig:
    period: int = 10
    tau_max: float = 0.5
    phi: float = 0.5
    neighbor_count: int = 2
    kl_sample_size: int = 1024

    def validate(self, ensemble_size: Optional[int] = None) -> None:
        if self.period < 1:
            raise ValueError("co-evolution period must be >= 1")
        if not 0 < self.tau_max <= 1:
            raise ValueError("tau_max must lie in (0, 1]")
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if self.kl_sample_size < 1:
            raise ValueError("kl_sample_size must be >= 1")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")
        if ensemble_size is not None and self.neighbor_count >= ensemble_size:
            raise ValueError("neighbor_count must be smaller than the ensemble")


@dataclass
class Member:
    index: int
    weights: WeightVector
    actor: NetworkParams
    critic: NetworkParams
    actor_opt: AdamState
    critic_opt: AdamState
    epoch: int = 0
    # mean shaped (u, d, b) per decision over the latest epoch
    recent_components: Optional[np.ndarray] = None
    history: list[dict] = field(default_factory=list)

    def scalarized_return(self, w: WeightVector) -> float:
        if self.recent_components is None:
            return float("-inf")
        return float(np.dot(w.as_array(), self.recent_components))


@dataclass
class PolicyEnsemble:
    members: list[Member]

    def __len__(self) -> int:
        return len(self.members)

    @property
    def weights(self) -> list[WeightVector]:
        return [m.weights for m in self.members]


class StatePool:
    """Ring buffer of recent (observation, mask) pairs shared by all members."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self.obs = np.zeros((capacity, OBS_DIM))
        self.masks = np.zeros((capacity, 3), dtype=bool)
        self.size = 0
        self.head = 0

    def add(self, obs: np.ndarray, masks: np.ndarray) -> None:
        for o, m in zip(obs, masks):
            self.obs[self.head] = o
            self.masks[self.head] = m
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        return self.obs[:self.size], self.masks[:self.size]

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=n)
        return self.obs[idx], self.masks[idx]

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "size": self.size, "head": self.head,
                "obs": self.obs[:self.size].tolist(), "masks": self.masks[:self.size].astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StatePool":
        pool = cls(d["capacity"])
        n = d["size"]
        if n:
            pool.obs[:n] = np.asarray(d["obs"], dtype=np.float64)
            pool.masks[:n] = np.asarray(d["masks"], dtype=bool)
        pool.size, pool.head = n, d["head"]
        return pool


def build_ensemble(weight_table: Sequence[Sequence[float]] = DEFAULT_WEIGHT_TABLE, seed: int = 0,
                   ppo_config: Optional[PpoConfig] = None, hidden=HIDDEN) -> PolicyEnsemble:
    cfg = ppo_config or PpoConfig()
    weights = [WeightVector(*map(float, row)) for row in weight_table]
    if len(weights) < 2:
        raise ValueError("an ensemble needs at least two members")
    members = []
    for p, w in enumerate(weights):
        rng = seeding.child_rng(seed, seeding.INIT, p)
        members.append(Member(
            index=p, weights=w,
            actor=init_params(actor_sizes(OBS_DIM, hidden), rng),
            critic=init_params(critic_sizes(OBS_DIM, hidden), rng),
            actor_opt=AdamState(lr=cfg.actor_lr),
            critic_opt=AdamState(lr=cfg.critic_lr),
        ))
    return PolicyEnsemble(members)


def neighbor_set(weights: Sequence[WeightVector], p: int, k: int) -> list[int]:
    """The k members nearest to member p in weight space (Euclidean; ties -> lower index)."""
    if k >= len(weights):
        raise ValueError("k must be smaller than the ensemble size")
    wp = weights[p].as_array()
    # rounding lets distances that tie in exact arithmetic tie here too
    dist = [(round(float(np.linalg.norm(w.as_array() - wp)), 12), q) for q, w in enumerate(weights) if q != p]
    return [q for _, q in sorted(dist)[:k]]


def kl_from_probs(pp: np.ndarray, pq: np.ndarray) -> float:
    """Mean over rows of KL(pp || pq); zero-probability terms of pp contribute nothing."""
    pq = np.maximum(pq, KL_FLOOR)
    safe_pp = np.where(pp > 0, pp, 1.0)
    terms = np.where(pp > 0, pp * np.log(safe_pp / pq), 0.0)
    return float(terms.sum(axis=1).mean())


def estimate_kl(actor_p: NetworkParams, actor_q: NetworkParams, obs: np.ndarray, masks: np.ndarray) -> float:
    if len(obs) == 0:
        raise ContractError("state pool is empty")
    return kl_from_probs(forward_policy(actor_p, obs, masks), forward_policy(actor_q, obs, masks))


def adaptive_tau(kl: float, tau_max: float = 0.5, phi: float = 0.5) -> float:
    if kl < 0:
        raise ValueError("KL divergence must be non-negative")
    return tau_max * math.exp(-phi * kl)


def coevolution_step(ensemble: PolicyEnsemble, pool: StatePool, config: CoEvolutionConfig,
                     epoch: int = 0) -> list[dict]:
    """One co-evolution phase; mutates ``ensemble`` and returns log rows.

    All returns and KLs read pre-phase snapshots, so the phase does not depend on
    the order members are visited in.
    """
    obs, masks = pool.contents()
    snap_actor = [m.actor.copy() for m in ensemble.members]
    snap_critic = [m.critic.copy() for m in ensemble.members]
    weights = ensemble.weights
    rows = []
    for p, member in enumerate(ensemble.members):
        wp = weights[p]
        neigh = neighbor_set(weights, p, config.neighbor_count)
        scores = [(ensemble.members[q].scalarized_return(wp), q) for q in neigh]
        best = max(s for s, _ in scores)
        q_star = min(q for s, q in scores if s == best)
        own = member.scalarized_return(wp)
        row = {"epoch": epoch, "p": p, "q_star": q_star, "kl": "", "tau": "", "transferred": 0,
               "return_p": own, "return_qstar": best}
        if best > own:
            kl = estimate_kl(snap_actor[p], snap_actor[q_star], obs, masks)
            tau = adaptive_tau(kl, config.tau_max, config.phi)
            member.actor = soft_blend(snap_actor[p], snap_actor[q_star], tau)
            member.critic = soft_blend(snap_critic[p], snap_critic[q_star], tau)
            member.actor_opt.reset()
            member.critic_opt.reset()
            row.update(kl=kl, tau=tau, transferred=1)
        rows.append(row)
    return rows


# -- training -------------------------------------------------------------------

def train_member_epoch(member: Member, epoch: int, master_seed: int, sim_config: SimConfig,
                       predictor_config: PredictorConfig, ppo_config: PpoConfig):
    """Collect this epoch's episodes for one member and apply a PPO update.

    Pure in its inputs and seeds, so it can run in a worker process.
    """
    env = SchedulingEnv(sim_config, NoShowPredictor(predictor_config))
    p = member.index
    seeds = seeding.episode_seeds(master_seed, p, epoch, ppo_config.episodes_per_epoch)
    traj = collect_rollout(member.actor, env, member.weights, seeds,
                           seeding.child_rng(master_seed, seeding.ACTIONS, p, epoch), critic=member.critic)
    stats = ppo_update(member.actor, member.critic, member.actor_opt, member.critic_opt, traj, ppo_config,
                       seeding.child_rng(master_seed, seeding.SHUFFLE, p, epoch))
    member.epoch = epoch
    member.recent_components = traj.components.mean(axis=0)
    row = {
        "epoch": epoch, "policy_id": p,
        "mean_shaped_total_reward": float(np.mean(traj.episode_returns)),
        "policy_loss": stats["policy_loss"], "value_loss": stats["value_loss"],
        "entropy": stats["entropy"], "clip_fraction": stats["clip_fraction"],
    }
    member.history.append(row)
    return member, traj.obs, traj.masks, row


def _pool_share(pool: StatePool, n_members: int) -> int:
    return max(1, math.ceil(pool.capacity / n_members))


def run_epoch(ensemble: PolicyEnsemble, pool: StatePool, epoch: int, master_seed: int, sim_config: SimConfig,
              predictor_config: PredictorConfig, ppo_config: PpoConfig, co_config: CoEvolutionConfig,
              executor: Optional[ProcessPoolExecutor] = None):
    """Train every member once, refresh the state pool, co-evolve on period boundaries."""
    args = [(m, epoch, master_seed, sim_config, predictor_config, ppo_config) for m in ensemble.members]
    if executor is None:
        results = [train_member_epoch(*a) for a in args]
    else:
        results = list(executor.map(train_member_epoch, *zip(*args)))
    curve_rows = []
    share = _pool_share(pool, len(ensemble))
    for p, (member, obs, masks, row) in enumerate(results):
        ensemble.members[p] = member
        curve_rows.append(row)
        rng = seeding.child_rng(master_seed, seeding.POOL, epoch, p)
        take = rng.choice(len(obs), size=min(share, len(obs)), replace=False) if len(obs) else []
        pool.add(obs[take], masks[take])
    co_rows = []
    if epoch % co_config.period == 0:
        co_rows = coevolution_step(ensemble, pool, co_config, epoch)
    return curve_rows, co_rows


def train(ensemble: PolicyEnsemble, epochs: int, master_seed: int, sim_config: SimConfig,
          predictor_config: PredictorConfig, ppo_config: PpoConfig, co_config: CoEvolutionConfig,
          pool: Optional[StatePool] = None, start_epoch: int = 1, threads: int = 1,
          on_epoch: Optional[Callable[[int, list, list], None]] = None):
    """Lockstep training for epochs ``start_epoch..epochs``; returns (ensemble, pool, curves, co-evolution log)."""
    co_config.validate(len(ensemble))
    ppo_config.validate()
    pool = pool or StatePool(co_config.kl_sample_size)
    curves, co_log = [], []
    executor = ProcessPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(start_epoch, epochs + 1):
            c_rows, k_rows = run_epoch(ensemble, pool, epoch, master_seed, sim_config, predictor_config,
                                       ppo_config, co_config, executor)
            curves += c_rows
            co_log += k_rows
            log.info("epoch %d: mean shaped return %.3f", epoch,
                     np.mean([r["mean_shaped_total_reward"] for r in c_rows]))
            if on_epoch is not None:
                on_epoch(epoch, c_rows, k_rows)
    finally:
        if executor is not None:
            executor.shutdown()
    return ensemble, pool, curves, co_log
