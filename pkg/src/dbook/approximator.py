"""Feed-forward actor/critic networks with hand-written backprop and Adam.

Everything runs in float64. Parameters are kept as a flat list
``[W1, b1, W2, b2, ..., Wk, bk]`` so optimizers, blending and checkpointing
can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import ContractError

MASK_PENALTY = 1e9
HIDDEN = (128, 128)


class TrainingError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class NetworkParams:
    arrays: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.arrays) // 2

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.arrays[0].shape[0],) + tuple(W.shape[1] for W in self.arrays[::2])

    def copy(self) -> "NetworkParams":
        return NetworkParams([a.copy() for a in self.arrays])

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays)

    def to_nested(self) -> list:
        return [a.tolist() for a in self.arrays]

    @classmethod
    def from_nested(cls, nested) -> "NetworkParams":
        return cls([np.asarray(a, dtype=np.float64) for a in nested])


def _orthogonal(shape, gain, rng):
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q


def init_params(sizes: Sequence[int], rng: np.random.Generator,
                hidden_gain: float = 1.0, output_gain: float = 0.01) -> NetworkParams:
    """Orthogonal weights (small gain on the output layer) and zero biases."""
    arrays = []
    n = len(sizes) - 1
    for i in range(n):
        gain = output_gain if i == n - 1 else hidden_gain
        arrays.append(_orthogonal((sizes[i], sizes[i + 1]), gain, rng))
        arrays.append(np.zeros(sizes[i + 1]))
    return NetworkParams(arrays)


def actor_sizes(obs_dim: int = 10, hidden=HIDDEN, n_actions: int = 3):
    return (obs_dim, *hidden, n_actions)


def critic_sizes(obs_dim: int = 10, hidden=HIDDEN):
    return (obs_dim, *hidden, 1)


def mlp_forward(params: NetworkParams, X: np.ndarray):
    """tanh hidden layers, linear output. Returns (output, activations cache)."""
    acts = [X]
    h = X
    arrs = params.arrays
    last = len(arrs) - 2
    for i in range(0, len(arrs), 2):
        z = h @ arrs[i] + arrs[i + 1]
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(params: NetworkParams, acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
    arrs = params.arrays
    grads: list[np.ndarray] = [None] * len(arrs)  # type: ignore[list-item]
    g = dout
    for li in range(params.n_layers - 1, -1, -1):
        a_in = acts[li]
        grads[2 * li] = a_in.T @ g
        grads[2 * li + 1] = g.sum(axis=0)
        if li > 0:
            g = (g @ arrs[2 * li].T) * (1.0 - acts[li] ** 2)
    return grads


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("every row needs at least one valid action")
    z = logits - MASK_PENALTY * (~mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_policy(params: NetworkParams, observation: np.ndarray, action_mask) -> np.ndarray:
    """Action probabilities; masked actions get exactly 0."""
    logits, _ = mlp_forward(params, np.atleast_2d(observation))
    probs = masked_softmax(logits, np.atleast_2d(action_mask))
    return probs[0] if np.ndim(observation) == 1 else probs


def forward_value(params: NetworkParams, observation: np.ndarray):
    v, _ = mlp_forward(params, np.atleast_2d(observation))
    return float(v[0, 0]) if np.ndim(observation) == 1 else v[:, 0]


def policy_probs_fast(arrays: list[np.ndarray], x: np.ndarray, mask: Sequence[bool]) -> list[float]:
    """Single-observation path for rollouts (same maths as :func:`forward_policy`)."""
    W1, b1, W2, b2, W3, b3 = arrays
    z = (np.tanh(np.tanh(x @ W1 + b1) @ W2 + b2) @ W3 + b3).tolist()
    zs = [z[k] if mask[k] else z[k] - MASK_PENALTY for k in range(3)]
    m = max(zs)
    e = [math.exp(v - m) for v in zs]
    t = e[0] + e[1] + e[2]
    return [v / t for v in e]


# -- losses -------------------------------------------------------------------

def _safe_log(p):
    return np.log(np.where(p > 0, p, 1.0))


def entropy(probs: np.ndarray) -> np.ndarray:
    return -(probs * _safe_log(probs)).sum(axis=-1)


def clipped_objective(ratio, advantage, clip_eps):
    """Per-sample PPO surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantage)


def actor_loss_and_grad(params: NetworkParams, obs, masks, actions, old_logp, advantages,
                        clip_eps: float = 0.2, entropy_coef: float = 0.01):
    """Clipped surrogate loss (negated, minus the entropy bonus) and its gradient."""
    n = len(actions)
    logits, acts = mlp_forward(params, obs)
    probs = masked_softmax(logits, masks)
    logp_all = _safe_log(probs)
    idx = np.arange(n)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps)
    surr = np.minimum(ratio * advantages, clipped * advantages)
    ent = -(probs * logp_all).sum(axis=1)
    loss = -surr.mean() - entropy_coef * ent.mean()

    active = ratio * advantages <= clipped * advantages
    g_logp = -(ratio * advantages * active) / n
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    dz = g_logp[:, None] * (onehot - probs)
    # d(-c * H)/dz = c * p * (log p + H)
    dz += (entropy_coef / n) * probs * (logp_all + ent[:, None])
    grads = mlp_backward(params, acts, dz)
    stats = {
        "policy_loss": float(-surr.mean()),
        "entropy": float(ent.mean()),
        "ratio_mean": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    return float(loss), grads, stats


def critic_loss_and_grad(params: NetworkParams, obs, returns, value_coef: float = 0.5):
    v, acts = mlp_forward(params, obs)
    err = v[:, 0] - returns
    loss = value_coef * float(np.mean(err ** 2))
    dout = (2.0 * value_coef / len(returns)) * err[:, None]
    return loss, mlp_backward(params, acts, dout)


# -- optimisation ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[list[np.ndarray]] = field(default=None, repr=False)
    v: Optional[list[np.ndarray]] = field(default=None, repr=False)

    def reset(self) -> None:
        self.step = 0
        self.m = None
        self.v = None

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": None if self.m is None else [a.tolist() for a in self.m],
            "v": None if self.v is None else [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        conv = (lambda xs: None if xs is None else [np.asarray(a, dtype=np.float64) for a in xs])
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"], conv(d["m"]), conv(d["v"]))


def backward_update(params: NetworkParams, state: AdamState, grads: list[np.ndarray]) -> NetworkParams:
    """One Adam step applied in place; returns ``params`` for chaining."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in parameter block {i} "
                                f"(shape {g.shape}, {bad} bad entries, step {state.step})")
    if state.m is None:
        state.m = [np.zeros_like(a) for a in params.arrays]
        state.v = [np.zeros_like(a) for a in params.arrays]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(params.arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def soft_blend(params_p: NetworkParams, params_q: NetworkParams, tau: float) -> NetworkParams:
    """Convex combination ``tau * q + (1 - tau) * p`` of every parameter block."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau {tau} outside [0, 1]")
    if len(params_p.arrays) != len(params_q.arrays) or any(
            a.shape != b.shape for a, b in zip(params_p.arrays, params_q.arrays)):
        raise ContractError("cannot blend networks of different shapes")
    return NetworkParams([tau * b + (1.0 - tau) * a for a, b in zip(params_p.arrays, params_q.arrays)])
