"""Synthetic click -> conversion -> refund event generator with a known truth model.

Ground truth is linear in per-index latent weights (one weight per field index
and task), passed through a sigmoid. With ``drift_rate > 0`` each weight rotates
between two latent draws as ``cos(rate*t) * a + sin(rate*t) * b`` so that the
marginal spread of the logits is preserved while the ranking of items changes
slowly with time. The bias is re-solved on a quarter-day grid (linearly
interpolated in between) so the population means stay at their targets while
the items carrying the conversions move.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.signal import fftconvolve
from scipy.special import expit, logit

from .errors import ConfigError


@dataclass(frozen=True)
class SimConfig:
    num_fields: int = 6
    cardinality_per_field: int = 50
    horizon_days: int = 11
    clicks_per_day: int = 18182
    # truth biases are solved so that conversions / clicks and
    # refunds / conversions land on these means at every point in time
    target_cvr: float = 0.0067
    target_rfr: float = 0.163
    base_cvr_logit_scale: float = 1.0
    base_rfr_logit_scale: float = 1.0
    conversion_delay_mean_days: float = 1.0
    refund_delay_mean_days: float = 1.5
    drift_rate: float = 0.08
    zipf_exponent: float = 1.0
    # correlation between the conversion and refund latent weights of an index
    task_correlation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_fields", "cardinality_per_field", "horizon_days", "clicks_per_day"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.conversion_delay_mean_days <= 0 or self.refund_delay_mean_days <= 0:
            raise ConfigError("delay means must be positive")
        if self.drift_rate < 0:
            raise ConfigError("drift_rate must be >= 0")
        if not -1.0 <= self.task_correlation <= 1.0:
            raise ConfigError("task_correlation must lie in [-1, 1]")
        for name in ("target_cvr", "target_rfr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClickEvent:
    features: tuple[int, ...]
    click_time: float
    w: float = math.inf
    v: float = math.inf

    def __post_init__(self):
        if math.isinf(self.w) and not math.isinf(self.v):
            raise ValueError("refund without conversion")
        if self.w <= 0 or self.v <= 0:
            raise ValueError("delays must be positive")


@dataclass
class EventLog:
    """Columnar event stream; row i is one clicked sample."""

    features: np.ndarray  # (N, F) int64
    click_time: np.ndarray  # (N,)
    w: np.ndarray  # (N,) inf = never converts
    v: np.ndarray  # (N,) inf = never refunds

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.click_time), -1)
        self.click_time = np.asarray(self.click_time, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.click_time)

    def __iter__(self) -> Iterator[ClickEvent]:
        for i in range(len(self)):
            yield self.event(i)

    def event(self, i: int) -> ClickEvent:
        return ClickEvent(tuple(int(x) for x in self.features[i]), float(self.click_time[i]), float(self.w[i]), float(self.v[i]))

    def subset(self, idx) -> "EventLog":
        return EventLog(self.features[idx], self.click_time[idx], self.w[idx], self.v[idx])

    @classmethod
    def from_events(cls, events: Sequence[ClickEvent], num_fields: int | None = None) -> "EventLog":
        if not events:
            return cls(np.zeros((0, num_fields or 0), dtype=np.int64), np.zeros(0), np.zeros(0), np.zeros(0))
        return cls(
            np.array([e.features for e in events], dtype=np.int64),
            np.array([e.click_time for e in events]),
            np.array([e.w for e in events]),
            np.array([e.v for e in events]),
        )

    @classmethod
    def concat(cls, logs: Sequence["EventLog"]) -> "EventLog":
        return cls(
            np.concatenate([l.features for l in logs]),
            np.concatenate([l.click_time for l in logs]),
            np.concatenate([l.w for l in logs]),
            np.concatenate([l.v for l in logs]),
        )

    def counts(self) -> dict[str, int]:
        converted = np.isfinite(self.w)
        refunded = np.isfinite(self.v)
        return {
            "clicks": len(self),
            "conversions": int(converted.sum()),
            "refunds": int(refunded.sum()),
            "effective_conversions": int((converted & ~refunded).sum()),
        }


def zipf_probs(cardinality: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, cardinality + 1, dtype=np.float64)
    p = ranks**-exponent
    return p / p.sum()


BIAS_STEP = 0.25  # days between bias solves under drift
REFERENCE_SAMPLE = 1 << 16  # feature vectors used to solve the conditional refund bias


def _solve_bias(target: float, field_logits: list[np.ndarray], probs: np.ndarray) -> float:
    if target <= 0.0:
        return -math.inf
    if target >= 1.0:
        return math.inf
    support, mass = logit_distribution(field_logits, probs)
    if np.ptp(support) == 0.0:
        return float(logit(target) - support[0])
    f = lambda b: float(np.dot(mass, expit(b + support))) - target
    return brentq(f, -60.0, 60.0, xtol=1e-13, rtol=1e-13)


def logit_distribution(field_logits: list[np.ndarray], probs: np.ndarray, grid: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Distribution of the summed per-field logit under independent categorical fields.

    Each field's (value, prob) atoms are placed on a uniform grid, splitting mass
    linearly between the two neighbouring points so every partial sum keeps its
    exact mean; fields are then convolved. The error in E[sigmoid(.)] is O(grid^2).
    """
    if all(np.ptp(fl) == 0.0 for fl in field_logits):
        return np.array([float(sum(fl[0] for fl in field_logits))]), np.array([1.0])
    dist = np.array([1.0])
    lo = 0.0
    for fl in field_logits:
        fmin = float(fl.min())
        pos = (fl - fmin) / grid
        k = np.floor(pos).astype(np.int64)
        frac = pos - k
        kernel = np.zeros(int(k.max()) + 2)
        np.add.at(kernel, k, probs * (1.0 - frac))
        np.add.at(kernel, k + 1, probs * frac)
        dist = fftconvolve(dist, kernel)
        lo += fmin
    dist = np.clip(dist, 0.0, None)
    dist /= dist.sum()
    support = lo + grid * np.arange(len(dist))
    keep = dist > 1e-300
    return support[keep], dist[keep]


class GroundTruth:
    """True conversion and refund probabilities as functions of (features, time)."""

    def __init__(self, config: SimConfig):
        self.config = config
        F, C = config.num_fields, config.cardinality_per_field
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0x7EE7])
        self.feature_probs = zipf_probs(C, config.zipf_exponent)
        # (task, phase, field, index); phase 0 = cos component, 1 = sin component
        per_field_sd = 1.0 / math.sqrt(F)
        z = rng.standard_normal((2, 2, F, C))
        rho = config.task_correlation
        z[1] = rho * z[0] + math.sqrt(1.0 - rho * rho) * z[1]
        self.latent = z * per_field_sd
        self.scales = np.array([config.base_cvr_logit_scale, config.base_rfr_logit_scale])
        if config.drift_rate > 0:
            self.bias_grid = np.arange(0.0, config.horizon_days + BIAS_STEP, BIAS_STEP)
        else:
            self.bias_grid = np.zeros(1)
        ref_rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0x4EF5])
        self.reference = ref_rng.choice(C, size=(REFERENCE_SAMPLE, F), p=self.feature_probs)
        cvr = [_solve_bias(config.target_cvr, list(self.weights(t)[0]), self.feature_probs) for t in self.bias_grid]
        rfr = [self._solve_rfr_bias(b, t) for b, t in zip(cvr, self.bias_grid)]
        self.bias_values = np.array([cvr, rfr])

    def _reference_sums(self, task: int, t: float) -> np.ndarray:
        fields = np.arange(self.reference.shape[1])
        return self.weights(t)[task][fields, self.reference].sum(axis=1)

    def _solve_rfr_bias(self, cvr_bias: float, t: float) -> float:
        """Refund bias whose conversion-weighted mean p_rfr equals the target.

        Refunds are only observed on converted clicks, so the target refers to
        refunds / conversions. Solved on the fixed reference sample; with no
        conversions at all it falls back to the plain population mean.
        """
        target = self.config.target_rfr
        if target <= 0.0 or target >= 1.0 or math.isinf(cvr_bias) and cvr_bias < 0:
            return _solve_bias(target, list(self.weights(t)[1]), self.feature_probs)
        s_r = self._reference_sums(1, t)
        if np.ptp(s_r) == 0.0:
            return float(logit(target) - s_r[0])
        weight = expit(cvr_bias + self._reference_sums(0, t))
        weight = weight / weight.sum()
        f = lambda b: float(np.dot(weight, expit(b + s_r))) - target
        return brentq(f, -60.0, 60.0, xtol=1e-13, rtol=1e-13)

    def bias(self, task: int, t) -> np.ndarray:
        vals = self.bias_values[task]
        if np.isinf(vals[0]) or len(vals) == 1:
            return np.full(np.shape(t), vals[0])
        return np.interp(t, self.bias_grid, vals)

    def weights(self, t: float) -> np.ndarray:
        """Per-index weights at time t, shape (2 tasks, F, C)."""
        angle = self.config.drift_rate * t
        w = math.cos(angle) * self.latent[:, 0] + math.sin(angle) * self.latent[:, 1]
        return w * self.scales[:, None, None]

    def _logits(self, task: int, features: np.ndarray, t) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.int64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(features),))
        angle = self.config.drift_rate * t
        fields = np.arange(features.shape[1])
        a = self.latent[task, 0, fields, features]
        b = self.latent[task, 1, fields, features]
        total = np.cos(angle) * a.sum(axis=1) + np.sin(angle) * b.sum(axis=1)
        return self.bias(task, t) + self.scales[task] * total

    def p_cvr(self, features, t=0.0) -> np.ndarray:
        return expit(self._logits(0, features, t))

    def p_rfr(self, features, t=0.0) -> np.ndarray:
        return expit(self._logits(1, features, t))

    def true_ecvr(self, features, t=0.0) -> np.ndarray:
        return true_ecvr(self.p_cvr(features, t), self.p_rfr(features, t))

    def mean_rate(self, task: str, t: float = 0.0) -> float:
        """Mean truth rate at time t.

        ``"cvr"``: population mean of p_cvr, exact up to O(grid^2).
        ``"rfr"``: mean p_rfr among converting clicks (weighted by p_cvr), on
        the reference sample; the plain population mean when nothing converts.
        """
        k = {"cvr": 0, "rfr": 1}[task]
        bias = float(self.bias(k, t))
        if math.isinf(bias):
            return 1.0 if bias > 0 else 0.0
        cvr_bias = float(self.bias(0, t))
        if k == 1 and not (math.isinf(cvr_bias) and cvr_bias < 0):
            weight = expit(cvr_bias + self._reference_sums(0, t))
            return float(np.dot(weight, expit(bias + self._reference_sums(1, t))) / weight.sum())
        support, mass = logit_distribution(list(self.weights(t)[k]), self.feature_probs)
        return float(np.dot(mass, expit(bias + support)))

    def mean_rate_over(self, task: str, t0: float, t1: float, nodes: int = 16) -> float:
        """Time-average of ``mean_rate`` over [t0, t1] by Gauss-Legendre quadrature."""
        x, wts = np.polynomial.legendre.leggauss(nodes)
        ts = 0.5 * (t1 - t0) * x + 0.5 * (t1 + t0)
        return float(0.5 * np.dot(wts, [self.mean_rate(task, t) for t in ts]))


def true_ecvr(p_cvr, p_rfr):
    return np.asarray(p_cvr) * (1.0 - np.asarray(p_rfr))


def build_ground_truth(config: SimConfig) -> GroundTruth:
    return GroundTruth(config)


def simulate_day(config: SimConfig, truth: GroundTruth, day: int) -> EventLog:
    """Clicks of calendar day ``day`` (1-based; spans [day-1, day)), from an independent substream."""
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0xC11C, day])
    n = config.clicks_per_day
    F, C = config.num_fields, config.cardinality_per_field
    click_time = (day - 1) + np.sort(rng.random(n))
    features = rng.choice(C, size=(n, F), p=truth.feature_probs)
    conv_u = rng.random(n)
    w_draw = rng.exponential(config.conversion_delay_mean_days, n)
    refund_u = rng.random(n)
    v_draw = rng.exponential(config.refund_delay_mean_days, n)
    converts = conv_u < truth.p_cvr(features, click_time)
    refunds = converts & (refund_u < truth.p_rfr(features, click_time))
    # exponential draws are > 0 almost surely; guard the measure-zero case
    w = np.where(converts, np.maximum(w_draw, np.finfo(float).tiny), np.inf)
    v = np.where(refunds, np.maximum(v_draw, np.finfo(float).tiny), np.inf)
    return EventLog(features, click_time, w, v)


def simulate(config: SimConfig, truth: GroundTruth | None = None, days: Sequence[int] | None = None) -> EventLog:
    truth = truth or build_ground_truth(config)
    days = range(1, config.horizon_days + 1) if days is None else days
    return EventLog.concat([simulate_day(config, truth, d) for d in days])


def iter_events(config: SimConfig, truth: GroundTruth | None = None) -> Iterator[ClickEvent]:
    """Stream ClickEvents in click-time order, one day at a time."""
    truth = truth or build_ground_truth(config)
    for d in range(1, config.horizon_days + 1):
        yield from simulate_day(config, truth, d)
