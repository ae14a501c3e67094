"""Synthetic no-show probability providers.

These stand in for a trained no-show classifier: the scheduler only needs a
probability per request, so the provider is pluggable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

BETA_SAMPLER = "BetaSampler"
LOGISTIC_SYNTHETIC = "LogisticSynthetic"


@dataclass
class PredictorConfig:
    kind: str = BETA_SAMPLER
    beta_a: float = 0.8
    beta_b: float = 1.2
    logistic_weights: Optional[list[float]] = None
    logistic_bias: float = 0.0
    perturbation_delta: float = 0.0
    # False: the shift only changes what the policy sees, attendance keeps the unperturbed probability
    perturb_attendance: bool = True
    n_features: int = 8

    def validate(self) -> None:
        if self.kind not in (BETA_SAMPLER, LOGISTIC_SYNTHETIC):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta parameters must be positive")
        if not -1.0 <= self.perturbation_delta <= 1.0:
            raise ValueError("perturbation_delta must lie in [-1, 1]")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.logistic_weights is not None and len(self.logistic_weights) != self.n_features:
            raise ValueError("logistic_weights length must equal n_features")


def perturb(pi, delta):
    """Shift probabilities by ``delta`` probability points, clipped to [0, 1]."""
    return np.clip(np.asarray(pi, dtype=float) + delta, 0.0, 1.0)[()]


def sample_features(rng: np.random.Generator, n_features: int = 8, size: Optional[int] = None) -> np.ndarray:
    shape = (n_features,) if size is None else (size, n_features)
    return rng.random(shape)


class NoShowPredictor:
    """Maps patient features to a no-show probability."""

    def __init__(self, config: Optional[PredictorConfig] = None):
        self.config = config or PredictorConfig()
        self.config.validate()
        cfg = self.config
        if cfg.logistic_weights is None:
            self._w = np.zeros(cfg.n_features)
        else:
            self._w = np.asarray(cfg.logistic_weights, dtype=float)

    @property
    def n_features(self) -> int:
        return self.config.n_features

    def predict(self, features: np.ndarray, rng: np.random.Generator) -> float:
        return float(self.predict_batch(np.atleast_2d(features), rng)[0])

    def predict_batch(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Unperturbed probabilities for a ``(n, F)`` feature block."""
        cfg = self.config
        if cfg.kind == BETA_SAMPLER:
            return rng.beta(cfg.beta_a, cfg.beta_b, size=len(features))
        z = features @ self._w + cfg.logistic_bias
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic

    def mean_probability(self) -> float:
        cfg = self.config
        if cfg.kind == BETA_SAMPLER:
            return cfg.beta_a / (cfg.beta_a + cfg.beta_b)
        raise NotImplementedError("closed-form mean only for the Beta sampler")
