"""Ranking and calibration metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise UndefinedMetricError("empty scored set")
    return scores, labels


def _tie_groups(scores: np.ndarray, labels: np.ndarray, descending: bool):
    """Positive and negative counts per distinct score, in sweep order."""
    order = np.argsort(-scores if descending else scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos = np.add.reduceat(lab.astype(np.int64), starts)
    size = np.diff(np.r_[starts, len(s)])
    return pos, size - pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2.

    Counts are exact integers (twice the U statistic), so the result is the
    correctly rounded ratio and independent of sample order.
    """
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    pos, neg = _tie_groups(scores, labels, descending=False)
    neg_below = np.cumsum(neg) - neg
    twice_u = int(np.sum(2 * neg_below * pos + pos * neg))
    return twice_u / (2 * n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall step curve (average precision).

    Sweeping thresholds from the highest score down, each group of equal
    scores adds (recall gain) * (precision after admitting the whole group).
    """
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    pos, neg = _tie_groups(scores, labels, descending=True)
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    precision = tp / (tp + fp)
    return float(np.sum(pos * precision) / n_pos)


def ri_metric(method: float, base: float, oracle: float) -> float:
    """Relative improvement in percent: 0 at the base model, 100 at the oracle."""
    if oracle == base:
        raise UndefinedMetricError("relative improvement undefined when oracle equals base")
    return 100.0 * (method - base) / (oracle - base)


@dataclass
class Calibration:
    ratio: float
    mean_predicted: float
    mean_target: float
    # (mean predicted, mean target, count) per equal-count score bucket, low to high
    buckets: list[tuple[float, float, int]]


def calibration(scores, targets, n_buckets: int = 10) -> Calibration:
    """Mean prediction over mean target, overall and per equal-count bucket.

    ``targets`` may be 0/1 labels or true probabilities from the simulator.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if scores.size == 0:
        raise UndefinedMetricError("calibration of an empty set")
    order = np.argsort(scores, kind="mergesort")
    buckets = []
    for chunk in np.array_split(order, min(n_buckets, scores.size)):
        buckets.append((float(scores[chunk].mean()), float(targets[chunk].mean()), int(chunk.size)))
    mp, mt = float(scores.mean()), float(targets.mean())
    ratio = mp / mt if mt > 0 else math.inf
    return Calibration(ratio, mp, mt, buckets)


@dataclass
class PairedTest:
    mean_diff: float
    t_stat: float
    p_value: float
    significant: bool


def paired_ttest(a, b, alpha: float = 0.05) -> PairedTest:
    """Student paired t-test on per-shard metric values (two-sided)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    if d.size < 2 or np.all(d == d[0]):
        # zero variance: only a nonzero constant shift is a (degenerate) signal
        if d.size >= 2 and d[0] != 0.0:
            return PairedTest(float(d[0]), math.copysign(math.inf, d[0]), 0.0, True)
        return PairedTest(float(d.mean()) if d.size else 0.0, 0.0, 1.0, False)
    res = stats.ttest_rel(a, b)
    p = float(res.pvalue)
    return PairedTest(float(d.mean()), float(res.statistic), p, p < alpha)
