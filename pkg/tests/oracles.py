"""Slow, independent reference implementations used to check the fast code paths.

None of these import the implementation under test beyond plain data types.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# --- metrics ------------------------------------------------------------------


def brute_auc(scores, labels) -> Fraction:
    """Pair counting over every (positive, negative) pair, ties worth one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                wins += Fraction(1, 2)
    return wins / (len(pos) * len(neg))


def exact_pr_auc(scores, labels) -> Fraction:
    """Average precision by thresholding at every distinct score, in exact rationals.

    For each distinct threshold s (high to low) the admitted set is {score >= s};
    the area adds (recall(s) - recall(previous)) * precision(s).
    """
    n_pos = sum(1 for l in labels if l)
    area = Fraction(0)
    prev_recall = Fraction(0)
    for s in sorted(set(scores), reverse=True):
        admitted = [l for sc, l in zip(scores, labels) if sc >= s]
        tp = sum(1 for l in admitted if l)
        recall = Fraction(tp, n_pos)
        area += (recall - prev_recall) * Fraction(tp, len(admitted))
        prev_recall = recall
    return area


def all_label_patterns(n: int):
    for bits in itertools.product((0, 1), repeat=n):
        if any(bits):
            yield bits


# --- attribution --------------------------------------------------------------


def day_deadline(start: float, days: int) -> float:
    """End of calendar day (start_day + days - 1), where day d covers [d-1, d)."""
    start_day = math.floor(start) + 1
    return float(start_day + days - 1)


def reference_attribution(click: float, w: float, v: float, cutoff: float, W, V, W_list, V_list, mode: str):
    """Scalar labels and masks for one click with day-granular windows.

    Returns ``(labels, masks)`` dicts keyed like the implementation. Written
    from the determination rules directly, sample by sample.
    """
    conv = click + w
    refund = conv + v
    conv_windows = [(f"y{i + 1}", k) for i, k in enumerate(W_list)] + [("y", W)]
    ref_windows = [(f"z{j + 1}", k) for j, k in enumerate(V_list)] + [("z", V)]
    labels, masks = {}, {}
    for key, k in conv_windows:
        deadline = day_deadline(click, k)
        value = conv < deadline
        seen = conv <= cutoff
        masks[key] = (deadline <= cutoff) or (mode == "event" and value and seen)
        labels[key] = value
    converted_in_w = labels["y"]
    w_closed = day_deadline(click, W) <= cutoff
    for key, k in ref_windows:
        if not converted_in_w:
            labels[key] = False
            masks[key] = False
            continue
        deadline = day_deadline(conv, k)
        value = refund < deadline
        labels[key] = value
        if conv > cutoff or (mode == "window" and not w_closed):
            masks[key] = False
        else:
            masks[key] = (deadline <= cutoff) or (mode == "event" and value and refund <= cutoff)
    for a, ka in conv_windows:
        for b, kb in ref_windows:
            key = f"{a}&{b}"
            labels[key] = labels[a] and labels[b]
            if mode == "event":
                masks[key] = masks[a] and (not labels[a] or masks[b])
            else:
                # the latest admissible conversion lands on the last day of W_a
                last_conv_day_start = day_deadline(click, ka) - 1.0
                masks[key] = day_deadline(last_conv_day_start, kb) <= cutoff
    labels["ecvr"] = labels["y"] and not labels["z"]
    masks["ecvr"] = masks["y&z"]
    labels = {k: bool(labels[k] and masks[k]) for k in labels}
    return labels, masks


# --- losses -------------------------------------------------------------------


def scalar_bce(p: float, label: int, eps: float = 1e-7) -> float:
    p = min(max(p, eps), 1.0 - eps)
    return -math.log(p) if label else -math.log(1.0 - p)


def reference_loss(heads: dict, labels: dict, masks: dict, formula: list[tuple[str, tuple[str, ...]]]) -> float:
    """Sum over samples and terms of clamped BCE, skipping undetermined labels."""
    n = len(next(iter(heads.values())))
    total = 0.0
    for label, factors in formula:
        for i in range(n):
            if not masks[label][i]:
                continue
            p = 1.0
            for f in factors:
                p *= float(heads[f][i])
            total += scalar_bce(p, int(labels[label][i]))
    return total


def written_out_formula(variant: str, n: int, m: int) -> list[tuple[str, tuple[str, ...]]]:
    """Loss terms spelled out by hand for each variant family."""
    ys = [f"y{i}" for i in range(1, n + 1)]
    zs = [f"z{j}" for j in range(1, m + 1)]
    if variant == "defer_cvr":
        return [(y, ("q", f"a{i}")) for i, y in enumerate(ys, 1)] + [("y", ("q",))]
    if variant == "defer_rfr":
        return [(z, ("r", f"s{j}")) for j, z in enumerate(zs, 1)] + [("z", ("r",))]
    if variant == "esmm":
        return [("y", ("q",)), ("y&z", ("q", "r"))]
    de = [(y, ("q", f"a{i}")) for i, y in enumerate(ys, 1)] + [("y", ("q",))]
    de += [(f"y&{z}", ("q", "r", f"s{j}")) for j, z in enumerate(zs, 1)]
    if variant == "ecad_de":
        return de + [("y&z", ("q", "r"))]
    out = de + [(f"{y}&z", ("q", "r", f"u{i}")) for i, y in enumerate(ys, 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if variant == "ecad_lite":
                out.append((f"y{i}&z{j}", ("q", "r", f"u{i}", f"s{j}")))
            else:
                out.append((f"y{i}&z{j}", ("q", "r", f"t{i}_{j}")))
    return out + [("y&z", ("q", "r"))]


# --- gradients ----------------------------------------------------------------


def central_difference(f, x: np.ndarray, index, h: float = 1e-4) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
