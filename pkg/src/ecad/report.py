"""Shard-based evaluation of trained bundles and Table-1-shaped reports."""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attribution import LabeledBatch
from .errors import DataError, UndefinedMetricError
from .metrics import PairedTest, auc, calibration, paired_ttest, pr_auc, ri_metric
from .models import TASKS, VARIANTS, ModelBundle, predict, supported_tasks

BASE_FOR_TASK = {"CVR": "CVR_BASE", "RFR": "RFR_BASE", "ECVR": "ECVR_BASE"}
ORACLE = "ESMM_ORACLE"
COLUMNS = ("variant", "task", "AUC", "RI-AUC", "PR-AUC", "RI-PR-AUC", "calibration", "significance")
BETTER_MARK = "•"  # reference method significantly better than this row
WORSE_MARK = "∘"  # reference method significantly worse than this row


def shard_ids(n: int, shards: int, seed: int) -> np.ndarray:
    """Uniform random partition of n test rows into ``shards`` near-equal parts."""
    perm = np.random.default_rng([seed & 0xFFFFFFFF, 0x5AAD]).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % shards
    return ids


def task_rows(test: LabeledBatch, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Row selector and 0/1 labels for a task; RFR is evaluated on converted samples only."""
    converted = test.labels["y"].astype(bool)
    for key, m in test.masks.items():
        # refund labels only exist for conversions
        need = converted if key.startswith("z") else True
        if not np.all(m | ~need):
            raise DataError("test labels must be fully determined (attribute at cutoff=inf)")
    if task == "CVR":
        return np.ones(len(test), dtype=bool), test.labels["y"]
    if task == "RFR":
        rows = test.labels["y"].copy()
        return rows, test.labels["z"][rows]
    if task == "ECVR":
        return np.ones(len(test), dtype=bool), test.labels["ecvr"]
    raise ValueError(f"unknown task {task!r}")


@dataclass
class TaskEval:
    shard_auc: np.ndarray
    shard_pr_auc: np.ndarray
    calibration: float
    shard_key: str

    @property
    def auc(self) -> float:
        return _mean_defined(self.shard_auc)

    @property
    def pr_auc(self) -> float:
        return _mean_defined(self.shard_pr_auc)


def _mean_defined(x: np.ndarray) -> float:
    ok = ~np.isnan(x)
    if not ok.any():
        raise UndefinedMetricError("metric undefined on every shard")
    return float(x[ok].mean())


def _metric_or_nan(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return math.nan


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, shards: np.ndarray, n_shards: int) -> TaskEval:
    """Per-shard AUC / PR-AUC; a shard lacking a class contributes NaN and is skipped in the mean."""
    a = np.array([_metric_or_nan(auc, scores[shards == k], labels[shards == k]) for k in range(n_shards)])
    p = np.array([_metric_or_nan(pr_auc, scores[shards == k], labels[shards == k]) for k in range(n_shards)])
    cal = calibration(scores, labels).ratio
    key = hashlib.sha1(shards.tobytes() + labels.astype(np.uint8).tobytes()).hexdigest()
    return TaskEval(a, p, cal, key)


def evaluate_bundle(bundle: ModelBundle, test: LabeledBatch, ids: np.ndarray, n_shards: int) -> dict[str, TaskEval]:
    out = {}
    for task in supported_tasks(bundle.variant):
        rows, labels = task_rows(test, task)
        scores = predict(bundle, test.log.features[rows], task)
        out[task] = evaluate_scores(scores, labels, ids[rows], n_shards)
    return out


@dataclass
class ReportRow:
    variant: str
    task: str
    auc: float
    ri_auc: float
    pr_auc: float
    ri_pr_auc: float
    calibration: float
    mark: str


@dataclass
class EvalReport:
    rows: list[ReportRow]
    shard_metrics: dict[tuple[str, str], TaskEval] = field(default_factory=dict)
    paired: dict[tuple[str, str], PairedTest] = field(default_factory=dict)
    reference: str | None = None

    def row(self, variant: str, task: str) -> ReportRow:
        for r in self.rows:
            if r.variant == variant and r.task == task:
                return r
        raise KeyError((variant, task))

    def metric(self, variant: str, task: str, name: str = "auc") -> float:
        return getattr(self.row(variant, task), name)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(COLUMNS) + "\n")
        for r in self.rows:
            buf.write("\t".join(_cells(r)) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        table = [list(COLUMNS)] + [_cells(r, pct=True) for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
        lines = []
        for k, row in enumerate(table):
            lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
            if k == 0:
                lines.append("-" * len(lines[0]))
        if self.reference:
            lines.append("")
            lines.append(
                f"{BETTER_MARK}/{WORSE_MARK}: {self.reference} significantly better/worse "
                "(paired t-test over shards, 95%)"
            )
        return "\n".join(lines) + "\n"


def _fmt(x: float, pct: bool = False) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    digits = 2 if pct else 6
    x = round(x, digits) + 0.0  # never print "-0.00"
    return f"{x:.{digits}f}%" if pct else f"{x:.{digits}f}"


def _cells(r: ReportRow, pct: bool = False) -> list[str]:
    ri = (lambda x: _fmt(x, True)) if pct else _fmt
    return [r.variant, r.task, _fmt(r.auc), ri(r.ri_auc), _fmt(r.pr_auc), ri(r.ri_pr_auc), _fmt(r.calibration), r.mark]


def _ri(evals, variant, task, name) -> float:
    base, oracle = BASE_FOR_TASK[task], ORACLE
    if base not in evals or oracle not in evals:
        return math.nan
    try:
        return ri_metric(
            getattr(evals[variant][task], name), getattr(evals[base][task], name), getattr(evals[oracle][task], name)
        )
    except UndefinedMetricError:
        return math.nan


def make_report(evals: Mapping[str, Mapping[str, TaskEval]], reference: str | None = "ECAD") -> EvalReport:
    """Average shard metrics per (variant, task), add RI columns and significance marks."""
    for task in TASKS:
        keys = {e[task].shard_key for e in evals.values() if task in e}
        if len(keys) > 1:
            raise DataError(f"variants were evaluated on different shards for {task}")
    if reference not in evals:
        reference = None
    order = [v for v in VARIANTS if v in evals] + [v for v in evals if v not in VARIANTS]
    rows, paired, shard_metrics = [], {}, {}
    for variant in order:
        for task in TASKS:
            if task not in evals[variant]:
                continue
            te = evals[variant][task]
            shard_metrics[(variant, task)] = te
            mark = ""
            if reference and variant != reference and task in evals[reference]:
                ref = evals[reference][task]
                ok = ~(np.isnan(ref.shard_auc) | np.isnan(te.shard_auc))
                test = paired_ttest(ref.shard_auc[ok], te.shard_auc[ok])
                paired[(variant, task)] = test
                if test.significant:
                    mark = BETTER_MARK if test.mean_diff > 0 else WORSE_MARK
            rows.append(
                ReportRow(
                    variant,
                    task,
                    te.auc,
                    _ri(evals, variant, task, "auc"),
                    te.pr_auc,
                    _ri(evals, variant, task, "pr_auc"),
                    te.calibration,
                    mark,
                )
            )
    return EvalReport(rows, shard_metrics, paired, reference)
