"""Label attribution at a training cutoff.

A label is *determined* at a cutoff when its value can no longer change; see
``attribute_log`` for the two determination rules. Undetermined labels get
mask 0 and their stored value is forced to 0 so no downstream computation can
depend on it.

Label keys for a WindowConfig with n conversion and m refund windows:

    y1..yn, y          conversion within W_i / W
    z1..zm, z          refund within V_j / V of the conversion
    "<a>&<b>"          a in {y1..yn, y}, b in {z1..zm, z}
    ecvr               y and not z
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .simulator import ClickEvent, EventLog


@dataclass(frozen=True)
class Window:
    """Attribution window.

    Day-granular windows follow the inclusive calendar convention: a k-day
    window opened on calendar day d closes at the end of day d + k - 1.
    Day d spans [d - 1, d), so the deadline is ``floor(start) + k``.
    """

    length: float
    day_granular: bool = True

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigError(f"window length must be positive, got {self.length}")
        if self.day_granular and self.length != int(self.length):
            raise ConfigError("day-granular windows need a whole number of days")

    def deadline(self, start):
        start = np.asarray(start, dtype=np.float64)
        if self.day_granular:
            return np.floor(start) + self.length
        return start + self.length

    def hit(self, start, delay):
        """Whether an event ``delay`` after ``start`` falls strictly inside the window."""
        delay = np.asarray(delay, dtype=np.float64)
        if self.day_granular:
            return np.asarray(start, dtype=np.float64) + delay < self.deadline(start)
        return delay < self.length


def day_granular_windows(days: int) -> Window:
    if int(days) != days or days < 1:
        raise ConfigError(f"day-granular window needs days >= 1, got {days}")
    return Window(float(days), day_granular=True)


@dataclass(frozen=True)
class WindowConfig:
    W: Window
    V: Window
    W_list: tuple[Window, ...] = ()
    V_list: tuple[Window, ...] = ()

    def __post_init__(self):
        for name, outer, inner in (("W", self.W, self.W_list), ("V", self.V, self.V_list)):
            lengths = [w.length for w in inner]
            if any(b <= a for a, b in zip(lengths, lengths[1:])):
                raise ConfigError(f"{name}_list must be strictly ascending: {lengths}")
            if lengths and lengths[-1] >= outer.length:
                raise ConfigError(f"every {name}_i must be shorter than {name}={outer.length}")
            if any(w.day_granular != outer.day_granular for w in inner):
                raise ConfigError(f"{name}_list mixes day-granular and continuous windows")

    @classmethod
    def from_days(
        cls,
        W: float = 3,
        V: float = 3,
        W_list: Sequence[float] = (1, 2),
        V_list: Sequence[float] = (1, 2),
        day_granular: bool = True,
    ) -> "WindowConfig":
        mk = (lambda d: day_granular_windows(d)) if day_granular else (lambda d: Window(float(d), False))
        return cls(mk(W), mk(V), tuple(mk(d) for d in W_list), tuple(mk(d) for d in V_list))

    @property
    def n(self) -> int:
        return len(self.W_list)

    @property
    def m(self) -> int:
        return len(self.V_list)

    @property
    def day_granular(self) -> bool:
        return self.W.day_granular

    def conversion_keys(self) -> list[str]:
        return [f"y{i}" for i in range(1, self.n + 1)] + ["y"]

    def refund_keys(self) -> list[str]:
        return [f"z{j}" for j in range(1, self.m + 1)] + ["z"]

    def label_keys(self) -> list[str]:
        conv, ref = self.conversion_keys(), self.refund_keys()
        return conv + ref + [f"{a}&{b}" for a in conv for b in ref] + ["ecvr"]

    def to_dict(self) -> dict:
        return {
            "W": self.W.length,
            "V": self.V.length,
            "W_list": [w.length for w in self.W_list],
            "V_list": [v.length for v in self.V_list],
            "day_granular": self.day_granular,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowConfig":
        return cls.from_days(d["W"], d["V"], d["W_list"], d["V_list"], d["day_granular"])


def _conversion_windows(wc: WindowConfig) -> list[Window]:
    return [*wc.W_list, wc.W]


def _refund_windows(wc: WindowConfig) -> list[Window]:
    return [*wc.V_list, wc.V]


@dataclass
class LabeledBatch:
    """Attributed samples in columnar form; ``labels[k][i]`` is meaningful only where ``masks[k][i]``."""

    log: EventLog
    cutoff: float
    windows: WindowConfig
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    # deadline-based maturity, used for base-model eligibility
    matured: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.log)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(
            self.log.subset(idx),
            self.cutoff,
            self.windows,
            {k: v[idx] for k, v in self.labels.items()},
            {k: v[idx] for k, v in self.masks.items()},
            {k: v[idx] for k, v in self.matured.items()},
        )

    def sample(self, i: int) -> "LabeledSample":
        return LabeledSample(
            self.log.event(i),
            self.cutoff,
            {k: int(v[i]) for k, v in self.labels.items()},
            {k: bool(v[i]) for k, v in self.masks.items()},
        )

    def without_masks(self) -> "LabeledBatch":
        """Ablation: every undetermined label is treated as an observed negative."""
        ones = np.ones(len(self), dtype=bool)
        return LabeledBatch(
            self.log,
            self.cutoff,
            self.windows,
            {k: v & self.masks[k] for k, v in self.labels.items()},
            {k: ones.copy() for k in self.masks},
            self.matured,
        )


@dataclass
class LabeledSample:
    event: ClickEvent
    cutoff: float
    labels: dict[str, int]
    masks: dict[str, bool]

    @property
    def features(self) -> tuple[int, ...]:
        return self.event.features

    @property
    def click_time(self) -> float:
        return self.event.click_time

    @property
    def y(self) -> int:
        return self.labels["y"]

    @property
    def z(self) -> int:
        return self.labels["z"]

    @property
    def effective_label(self) -> int:
        return self.labels["ecvr"]

    def determined(self, key: str) -> bool:
        return self.masks[key]


MASK_MODES = ("event", "window")


def _last_instant(win: Window, start):
    """Latest time still strictly inside ``win`` opened at ``start`` (the deadline itself when continuous)."""
    d = win.deadline(start)
    return np.nextafter(d, -np.inf) if win.day_granular else d


def attribute_log(log: EventLog, cutoff: float, wc: WindowConfig, mask_mode: str = "event") -> LabeledBatch:
    """Attribute every click of ``log`` at ``cutoff``.

    ``mask_mode="event"``: a label is determined once its event has been seen
    inside the window or the window has closed, and a joint label ``a&b`` once
    ``a`` is a determined 0 or a determined 1 with ``b`` determined.

    ``mask_mode="window"``: determination depends on elapsed time only, never
    on outcomes. ``y_a`` needs W_a closed, ``z_b`` needs W closed and V_b
    closed after the conversion, and ``a&b`` needs V_b closed after the
    latest conversion W_a admits.

    In both modes z_b is only defined for a conversion inside W. Negatives and positives of one click then become
    visible together, so recent clicks do not enter the training set with
    their negatives only.
    """
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {mask_mode!r}")
    if len(log) and float(log.click_time.max()) > cutoff:
        raise DataError(f"click at t={float(log.click_time.max())} is after cutoff {cutoff}")
    event_mode = mask_mode == "event"
    c = log.click_time
    conv_time = c + log.w  # inf when never converts
    refund_time = conv_time + log.v
    conv_seen = conv_time <= cutoff
    labels: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}

    for key, win in zip(wc.conversion_keys(), _conversion_windows(wc)):
        val = win.hit(c, log.w)
        labels[key] = val
        masks[key] = (event_mode & val & conv_seen) | (win.deadline(c) <= cutoff)

    # refunds only count for conversions inside W; without one, z stays undetermined
    counted = conv_seen & wc.W.hit(c, log.w)
    if not event_mode:
        counted &= wc.W.deadline(c) <= cutoff
    with np.errstate(invalid="ignore"):
        for key, win in zip(wc.refund_keys(), _refund_windows(wc)):
            val = np.isfinite(conv_time) & wc.W.hit(c, log.w) & win.hit(conv_time, log.v)
            labels[key] = val
            masks[key] = counted & ((event_mode & val & (refund_time <= cutoff)) | (win.deadline(conv_time) <= cutoff))

    for a, wa in zip(wc.conversion_keys(), _conversion_windows(wc)):
        for b, vb in zip(wc.refund_keys(), _refund_windows(wc)):
            labels[f"{a}&{b}"] = labels[a] & labels[b]
            if event_mode:
                masks[f"{a}&{b}"] = masks[a] & (~labels[a] | masks[b])
            else:
                masks[f"{a}&{b}"] = vb.deadline(_last_instant(wa, c)) <= cutoff
    labels["ecvr"] = labels["y"] & ~labels["z"]
    masks["ecvr"] = masks["y&z"].copy()

    for k in labels:
        labels[k] = labels[k] & masks[k]

    matured = {
        "conversion": wc.W.deadline(c) <= cutoff,
        "refund": labels["y"] & (wc.V.deadline(conv_time) <= cutoff),
        "cascade": wc.V.deadline(_last_instant(wc.W, c)) <= cutoff,
        "converted": conv_seen & wc.W.hit(c, log.w),
    }
    return LabeledBatch(log, float(cutoff), wc, labels, masks, matured)


def attribute(event: ClickEvent, cutoff: float, wc: WindowConfig, mask_mode: str = "event") -> LabeledSample:
    if event.click_time > cutoff:
        raise DataError(f"click at t={event.click_time} is after cutoff {cutoff}")
    return attribute_log(EventLog.from_events([event]), cutoff, wc, mask_mode).sample(0)


# Training sample space of each network in a variant, in network order.
VARIANT_SPACES: dict[str, tuple[str, ...]] = {
    "CVR_BASE": ("matured_conversion",),
    "RFR_BASE": ("matured_refund",),
    "ECVR_BASE": ("matured_cascade",),
    "IM": ("matured_conversion", "matured_refund"),
    "IM_DEFER": ("all_clicks", "observed_conversions"),
    "ESMM": ("matured_cascade",),
    "ECAD_DE": ("all_clicks",),
    "ECAD_LITE": ("all_clicks",),
    "ECAD": ("all_clicks",),
    "ESMM_ORACLE": ("all_clicks",),
}


def space_mask(batch: LabeledBatch, space: str) -> np.ndarray:
    if space == "all_clicks":
        return np.ones(len(batch), dtype=bool)
    if space == "matured_conversion":
        return batch.matured["conversion"]
    if space == "matured_refund":
        return batch.matured["refund"]
    if space == "matured_cascade":
        return batch.matured["cascade"]
    if space == "observed_conversions":
        return batch.matured["converted"]
    raise ConfigError(f"unknown sample space {space!r}")


def eligible_for_variant(batch: LabeledBatch, variant: str, part: int = 0) -> np.ndarray:
    """Boolean mask of samples the variant's ``part``-th network trains on.

    Base models and ESMM only see samples whose required windows have fully
    elapsed; delayed-feedback variants see every click and rely on masks.
    """
    try:
        spaces = VARIANT_SPACES[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}") from None
    return space_mask(batch, spaces[part])


def end_of_day(day: int) -> float:
    """Cutoff time for 'the end of calendar day ``day``' (1-based)."""
    return float(day)


def day_of(t) -> np.ndarray:
    return np.floor(np.asarray(t, dtype=np.float64)).astype(np.int64) + 1
