"""Frozen-policy evaluation, heuristic baselines, sensitivity sweeps and Pareto filtering."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import seeding
from .approximator import NetworkParams, policy_probs_fast
from .domain import DOUBLE_BOOK, REJECT, SINGLE_BOOK, ActionMask, SlotCandidates, WeightVector
from .noshow import NoShowPredictor, PredictorConfig, perturb
from .simenv import SchedulingEnv, SimConfig

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_DELTAS = (-0.05, -0.03, 0.0, 0.03, 0.05)

RESULTS_COLUMNS = (
    "policy", "booking_request_mean", "booking_request_sd", "scheduled_mean", "scheduled_sd",
    "shows_mean", "shows_sd", "noshows_mean", "noshows_sd", "u_mean", "u_sd", "d_mean", "d_sd",
    "b_mean", "b_sd", "r_slotmean", "r_slotmean_sd", "r_total_mean",
)
SENSITIVITY_COLUMNS = ("policy", "delta", "r_slotmean", "rel_change")


@dataclass(frozen=True)
class BaselinePolicy:
    kind: str  # "SingleBookingOnly" or "DoubleBookThreshold"
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("SingleBookingOnly", "DoubleBookThreshold"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.kind == "DoubleBookThreshold" and not (self.threshold is not None and 0 <= self.threshold <= 1):
            raise ValueError("threshold must lie in [0, 1]")

    @property
    def label(self) -> str:
        return "SB" if self.kind == "SingleBookingOnly" else f"DB>={self.threshold:g}"


SINGLE_BOOKING_ONLY = BaselinePolicy("SingleBookingOnly")


def default_baselines() -> list[BaselinePolicy]:
    return [SINGLE_BOOKING_ONLY] + [BaselinePolicy("DoubleBookThreshold", t) for t in DEFAULT_THRESHOLDS]


def baseline_decide(policy: BaselinePolicy, candidates: Union[SlotCandidates, ActionMask], pi: float) -> int:
    has_empty = (candidates.empty_candidate is not None if isinstance(candidates, SlotCandidates)
                 else candidates.single)
    has_double = (candidates.double_candidate is not None if isinstance(candidates, SlotCandidates)
                  else candidates.double)
    if policy.kind == "SingleBookingOnly":
        return SINGLE_BOOK if has_empty else REJECT
    if pi >= policy.threshold and has_double:
        return DOUBLE_BOOK
    if has_empty:
        return SINGLE_BOOK
    return REJECT


@dataclass
class LearnedPolicy:
    """A trained actor used for evaluation; greedy over valid actions unless ``sample``."""

    label: str
    actor: NetworkParams
    sample: bool = False
    rng: Optional[np.random.Generator] = None

    def act(self, obs, mask) -> int:
        probs = policy_probs_fast(self.actor.arrays, obs, mask)
        if self.sample:
            from .ppo import sample_action
            return sample_action(probs, (self.rng or np.random.default_rng(0)).random())
        return max((k for k in range(3) if mask[k]), key=lambda k: probs[k])


DecisionSource = Union[BaselinePolicy, LearnedPolicy]


@dataclass
class EpisodeMetrics:
    requests: int
    scheduled: int
    shows: int
    noshows: int
    rejected: int
    u_bar: Optional[float]
    d_bar: Optional[float]
    b_bar: Optional[float]
    r_slotmean: Optional[float]
    r_total: float
    n_slots: int
    n_double_slots: int


def _mean_sd(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


@dataclass
class MetricsReport:
    label: str
    weights: WeightVector
    episodes: list[EpisodeMetrics] = field(default_factory=list)
    # pooled over all booked slots of all episodes
    u_bar: Optional[float] = None
    d_bar: Optional[float] = None
    b_bar: Optional[float] = None
    r_bar: Optional[float] = None
    flagged: bool = False

    def summary(self, name: str):
        return _mean_sd([getattr(e, name) for e in self.episodes])

    def row(self) -> dict:
        out = {"policy": self.label}
        for col, attr in (("booking_request", "requests"), ("scheduled", "scheduled"),
                          ("shows", "shows"), ("noshows", "noshows"), ("u", "u_bar"),
                          ("d", "d_bar"), ("b", "b_bar")):
            m, s = self.summary(attr)
            out[f"{col}_mean"] = "" if m is None else m
            out[f"{col}_sd"] = "" if s is None else s
        m, s = self.summary("r_slotmean")
        out["r_slotmean"] = "" if m is None else m
        out["r_slotmean_sd"] = "" if s is None else s
        out["r_total_mean"] = self.summary("r_total")[0]
        return out

    @property
    def objectives(self) -> tuple[float, float, float]:
        return (self.u_bar, self.d_bar, self.b_bar)


def slot_metrics(slot_outcomes, weights: WeightVector):
    """(U, D, B, R-mean, R-total, n_slots, n_double) from (n_booked, S, u, d, b) rows."""
    so = np.asarray(slot_outcomes, dtype=float).reshape(-1, 5)
    if len(so) == 0:
        return None, None, None, None, 0.0, 0, 0
    dbl = so[:, 0] == 2
    r = weights.alpha * so[:, 2] + weights.beta * so[:, 3] + weights.gamma * so[:, 4]
    return (float(so[:, 2].mean()), float(so[dbl, 3].mean()) if dbl.any() else None,
            float(so[:, 4].mean()), float(r.mean()), float(r.sum()), len(so), int(dbl.sum()))


def run_episode(source: DecisionSource, env: SchedulingEnv, seed, obs_sink: Optional[list] = None) -> None:
    obs, mask = env.reset(seed)
    baseline = isinstance(source, BaselinePolicy)
    while not env.done:
        if obs_sink is not None:
            obs_sink.append(obs)
        if baseline:
            a = baseline_decide(source, mask, env.pending_request.noshow_prob)
        else:
            a = source.act(obs, mask)
        obs, mask, *_ = env.step(a, voluntary_reject=baseline)


def evaluate_policy(source: DecisionSource, episodes: int = 5, seed: int = 0,
                    weights: Optional[WeightVector] = None, sim_config: Optional[SimConfig] = None,
                    predictor_config: Optional[PredictorConfig] = None, obs_sink: Optional[list] = None
                    ) -> MetricsReport:
    """Evaluate on ``episodes`` seeded episodes using realized (attendance-based) rewards.

    U and B average over booked slots, D over double-booked slots only.
    """
    weights = weights or WeightVector(1 / 3, 1 / 3, 1 / 3)
    env = SchedulingEnv(sim_config or SimConfig(), NoShowPredictor(predictor_config or PredictorConfig()))
    report = MetricsReport(source.label, weights)
    pooled = []
    for s in seeding.eval_seeds(seed, episodes):
        run_episode(source, env, s, obs_sink)
        u, d, b, r, rt, n, nd = slot_metrics(env.slot_outcomes, weights)
        st = env.stats
        report.episodes.append(EpisodeMetrics(st.requests, st.scheduled, st.shows, st.noshows, st.rejected,
                                              u, d, b, r, rt, n, nd))
        pooled += env.slot_outcomes
    report.u_bar, report.d_bar, report.b_bar, report.r_bar, *_ = slot_metrics(pooled, weights)
    report.flagged = report.u_bar is None
    return report


def sensitivity_sweep(sources: Sequence[DecisionSource], weights: Sequence[WeightVector],
                      deltas: Sequence[float] = DEFAULT_DELTAS, episodes: int = 5, seed: int = 0,
                      sim_config: Optional[SimConfig] = None,
                      predictor_config: Optional[PredictorConfig] = None) -> list[dict]:
    """Re-evaluate each source with every no-show probability shifted by each delta.

    The same evaluation seeds serve every delta, so rows differ only through the shift.
    """
    base_pred = predictor_config or PredictorConfig()
    rows = []
    for src, w in zip(sources, weights):
        ref = evaluate_policy(src, episodes, seed, w, sim_config,
                              dataclasses.replace(base_pred, perturbation_delta=0.0)).r_bar
        for delta in deltas:
            if delta == 0.0:
                r = ref
            else:
                r = evaluate_policy(src, episodes, seed, w, sim_config,
                                    dataclasses.replace(base_pred, perturbation_delta=float(delta))).r_bar
            rows.append({"policy": src.label, "delta": float(delta), "r_slotmean": r,
                         "rel_change": (r - ref) / ref})
    return rows


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """a weakly dominates b: no worse anywhere, strictly better somewhere."""
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_front(reports: Sequence, key: Callable = lambda r: r.objectives) -> list:
    """Reports whose (U, D, B) no other report dominates; order preserved."""
    pts = [tuple(key(r)) for r in reports]
    return [r for i, r in enumerate(reports)
            if not any(dominates(q, pts[i]) for j, q in enumerate(pts) if j != i)]


__all__ = [
    "BaselinePolicy", "LearnedPolicy", "MetricsReport", "baseline_decide", "default_baselines",
    "evaluate_policy", "sensitivity_sweep", "pareto_front", "dominates", "perturb",
]
