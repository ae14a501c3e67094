"""Exact Shapley attribution of policy action probabilities to state features.

All 2^F coalitions are enumerated; features outside a coalition are filled in
from background rows (interventional replacement), and the coalition value
is the mean model output over the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Callable, Sequence

import numpy as np

from .approximator import NetworkParams, mlp_forward
from .domain import FEATURE_NAMES, ContractError

ATTRIBUTION_COLUMNS = ("action", "feature_name", "mean_phi", "mean_abs_phi", "value_phi_corr_sign")

Model = Callable[[np.ndarray], np.ndarray]


@dataclass
class AttributionResult:
    instance: np.ndarray
    action: int
    base_value: float
    phi: np.ndarray
    output: float

    @property
    def efficiency_gap(self) -> float:
        return abs(self.base_value + float(self.phi.sum()) - self.output)


def action_probability_model(actor: NetworkParams, action: int) -> Model:
    """Probability of ``action`` under the full (unmasked) softmax."""

    def f(X):
        z, _ = mlp_forward(actor, X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, action] / e.sum(axis=1)

    return f


def coalition_masks(n_features: int) -> np.ndarray:
    """Row k is the membership vector of the coalition with bitmask k."""
    ks = np.arange(2 ** n_features)
    return ((ks[:, None] >> np.arange(n_features)) & 1).astype(bool)


def coalition_values(model: Model, instance: np.ndarray, background: np.ndarray,
                     chunk_rows: int = 1 << 16) -> np.ndarray:
    F = len(instance)
    masks = coalition_masks(F)
    B = len(background)
    values = np.empty(len(masks))
    per_chunk = max(1, chunk_rows // B)
    for start in range(0, len(masks), per_chunk):
        m = masks[start:start + per_chunk]
        X = np.where(m[:, None, :], instance[None, None, :], background[None, :, :])
        out = np.asarray(model(X.reshape(-1, F)), dtype=float).reshape(len(m), B)
        values[start:start + len(m)] = out.mean(axis=1)
    return values


def shapley_from_values(values: np.ndarray, n_features: int) -> np.ndarray:
    ks = np.arange(2 ** n_features)
    sizes = np.array([bin(k).count("1") for k in ks])
    fact = [factorial(s) for s in range(n_features + 1)]
    weight = np.array([fact[s] * fact[n_features - s - 1] / fact[n_features] if s < n_features else 0.0
                       for s in range(n_features + 1)])
    phi = np.empty(n_features)
    for f in range(n_features):
        without = ks[(ks >> f) & 1 == 0]
        phi[f] = np.sum(weight[sizes[without]] * (values[without | (1 << f)] - values[without]))
    return phi


def exact_shapley(model: Model, instance: Sequence[float], background: np.ndarray,
                  action: int = -1) -> AttributionResult:
    instance = np.asarray(instance, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.size == 0 or len(background) == 0:
        raise ContractError("background set is empty")
    if background.shape[1] != len(instance):
        raise ContractError("background and instance disagree on feature count")
    values = coalition_values(model, instance, background)
    phi = shapley_from_values(values, len(instance))
    return AttributionResult(instance, action, float(values[0]), phi, float(values[-1]))


def explain_policy(actor: NetworkParams, instance, background, action: int) -> AttributionResult:
    if action not in (0, 1, 2):
        raise ValueError(f"unknown action {action}")
    return exact_shapley(action_probability_model(actor, action), instance, background, action)


def summarize_attributions(results: Sequence[AttributionResult],
                           feature_names: Sequence[str] = FEATURE_NAMES) -> list[dict]:
    """Per feature: mean phi, mean |phi| and the sign of corr(feature value, phi)."""
    if not results:
        raise ContractError("no attributions to summarise")
    X = np.array([r.instance for r in results])
    P = np.array([r.phi for r in results])
    rows = []
    for f, name in enumerate(feature_names):
        x, p = X[:, f], P[:, f]
        if len(results) > 1 and x.std() > 0 and p.std() > 0:
            sign = int(np.sign(np.corrcoef(x, p)[0, 1]))
        else:
            sign = 0
        rows.append({"action": results[0].action, "feature_name": name, "mean_phi": float(p.mean()),
                     "mean_abs_phi": float(np.abs(p).mean()), "value_phi_corr_sign": sign})
    return rows


def summarize_policy(actor: NetworkParams, instances, background, action: int) -> list[dict]:
    instances = np.atleast_2d(np.asarray(instances, dtype=float))
    if len(instances) == 0:
        raise ContractError("no instances to attribute")
    return summarize_attributions([explain_policy(actor, x, background, action) for x in instances])
