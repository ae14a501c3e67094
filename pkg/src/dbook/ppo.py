"""Single-policy PPO: rollouts, GAE and clipped-surrogate updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .approximator import (
    AdamState,
    NetworkParams,
    TrainingError,
    actor_loss_and_grad,
    backward_update,
    critic_loss_and_grad,
    forward_value,
    policy_probs_fast,
)
from .domain import OBS_DIM, ContractError, WeightVector


@dataclass
class PpoConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    update_epochs: int = 4
    minibatch_size: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes_per_epoch: int = 5
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4

    def validate(self) -> None:
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.update_epochs < 1 or self.minibatch_size < 1 or self.episodes_per_epoch < 1:
            raise ValueError("update_epochs, minibatch_size and episodes_per_epoch must be >= 1")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class Trajectory:
    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    components: np.ndarray  # shaped (u, d, b) per decision
    dones: np.ndarray
    values: Optional[np.ndarray] = None
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def __post_init__(self):
        n = len(self.actions)
        for name in ("obs", "masks", "logp", "rewards", "components", "dones"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"trajectory field {name} has inconsistent length")


def sample_action(probs, u: float) -> int:
    if u < probs[0]:
        a = 0
    elif u < probs[0] + probs[1]:
        a = 1
    else:
        a = 2
    if probs[a] == 0.0:  # u landed on a rounding gap next to a masked action
        a = max(range(3), key=lambda k: probs[k])
    return a


def collect_rollout(actor: NetworkParams, env, weights: WeightVector, episode_seeds: Iterable,
                    rng: np.random.Generator, critic: Optional[NetworkParams] = None) -> Trajectory:
    """Run full episodes with actions sampled from the masked policy.

    Each decision's reward is the shaped (u, d, b) combined with ``weights``.
    """
    arrays = actor.arrays
    w = (weights.alpha, weights.beta, weights.gamma)
    obs_l, mask_l, act_l, logp_l, rew_l, comp_l, done_l = [], [], [], [], [], [], []
    ep_returns = []
    for seed in episode_seeds:
        obs, mask = env.reset(seed)
        total = 0.0
        while not env.done:
            probs = policy_probs_fast(arrays, obs, mask)
            a = sample_action(probs, rng.random())
            obs_l.append(obs)
            mask_l.append(mask)
            act_l.append(a)
            logp_l.append(math.log(probs[a]))
            obs, mask, comp, done, _ = env.step(a)
            r = w[0] * comp[0] + w[1] * comp[1] + w[2] * comp[2]
            total += r
            rew_l.append(r)
            comp_l.append(comp)
            done_l.append(done)
        ep_returns.append(total)
    n = len(act_l)
    traj = Trajectory(
        obs=np.array(obs_l, dtype=np.float64).reshape(n, OBS_DIM),
        masks=np.array(mask_l, dtype=bool).reshape(n, 3),
        actions=np.array(act_l, dtype=np.int64),
        logp=np.array(logp_l),
        rewards=np.array(rew_l),
        components=np.array(comp_l, dtype=np.float64).reshape(n, 3),
        dones=np.array(done_l, dtype=bool),
        episode_returns=ep_returns,
    )
    if critic is not None:
        traj.values = forward_value(critic, traj.obs) if n else np.zeros(0)
    return traj


def compute_gae(rewards, values, dones, discount: float = 0.99, gae_lambda: float = 0.95):
    """Backward GAE recursion; ``dones[t]`` marks a terminal transition (bootstrap 0).

    Returns raw (unnormalised) advantages and the value targets ``adv + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_v = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + discount * next_v * nonterminal - values[t]
        last = delta + discount * gae_lambda * nonterminal * last
        adv[t] = last
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(actor: NetworkParams, critic: NetworkParams, actor_opt: AdamState, critic_opt: AdamState,
               traj: Trajectory, config: PpoConfig, rng: np.random.Generator) -> dict:
    """Clipped-surrogate actor update and MSE critic update over shuffled minibatches."""
    n = len(traj)
    if n == 0:
        raise ContractError("empty trajectory")
    if traj.values is None:
        traj.values = forward_value(critic, traj.obs)
    adv, returns = compute_gae(traj.rewards, traj.values, traj.dones, config.discount, config.gae_lambda)
    adv = normalize(adv)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "ratio_mean": 0.0, "clip_fraction": 0.0}
    batches = 0
    first = None
    for _ in range(config.update_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            loss, grads, st = actor_loss_and_grad(
                actor, traj.obs[idx], traj.masks[idx], traj.actions[idx], traj.logp[idx], adv[idx],
                config.clip_eps, config.entropy_coef)
            vloss, vgrads = critic_loss_and_grad(critic, traj.obs[idx], returns[idx], config.value_coef)
            if not (math.isfinite(loss) and math.isfinite(vloss)):
                raise TrainingError(f"non-finite loss (actor {loss}, critic {vloss}) at minibatch {batches}, "
                                    f"adv range [{adv.min()}, {adv.max()}]")
            backward_update(actor, actor_opt, grads)
            backward_update(critic, critic_opt, vgrads)
            if first is None:
                first = st
            for k in ("policy_loss", "entropy", "ratio_mean", "clip_fraction"):
                sums[k] += st[k]
            sums["value_loss"] += vloss
            batches += 1
    out = {k: v / batches for k, v in sums.items()}
    out["first_ratio_mean"] = first["ratio_mean"]
    out["first_clip_fraction"] = first["clip_fraction"]
    out["n_samples"] = n
    return out
