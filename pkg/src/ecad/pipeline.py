"""End-to-end replication: simulate -> attribute -> train every variant -> shard evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import LabeledBatch, attribute_log, day_of, end_of_day
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .errors import StageError
from .models import ModelBundle, build, compose_im, train
from .report import EvalReport, evaluate_bundle, make_report, shard_ids
from .simulator import EventLog, GroundTruth, build_ground_truth, simulate

log = logging.getLogger(__name__)


@dataclass
class ReplicationResult:
    config: ExperimentConfig
    report: EvalReport
    bundles: dict[str, ModelBundle]
    truth: GroundTruth
    train_batch: LabeledBatch
    test_batch: LabeledBatch


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def split_days(events: EventLog, train_days: int, test_day: int) -> tuple[EventLog, EventLog]:
    day = day_of(events.click_time)
    return events.subset(day <= train_days), events.subset(day == test_day)


def train_variants(config: ExperimentConfig, train_batch: LabeledBatch) -> dict[str, ModelBundle]:
    cards = [config.sim.cardinality_per_field] * config.sim.num_fields
    wanted = list(config.variants)
    needed = set(wanted) | ({"CVR_BASE", "RFR_BASE"} if "IM" in wanted else set())
    trained: dict[str, ModelBundle] = {}
    for variant in [v for v in ("CVR_BASE", "RFR_BASE") if v in needed] + [v for v in wanted if v not in ("CVR_BASE", "RFR_BASE", "IM")]:
        log.info("training %s", variant)
        trained[variant] = train(build(variant, config.windows, cards, config.net), train_batch, config.train)
    if "IM" in wanted:
        trained["IM"] = compose_im(trained["CVR_BASE"], trained["RFR_BASE"])
    return {v: trained[v] for v in wanted}


def replicate(config: ExperimentConfig, out_dir: str | Path | None = None) -> ReplicationResult:
    with _stage("simulate"):
        truth = build_ground_truth(config.sim)
        events = simulate(config.sim, truth, days=range(1, config.test_day + 1))
    with _stage("attribute"):
        train_log, test_log = split_days(events, config.train_days, config.test_day)
        train_batch = attribute_log(train_log, end_of_day(config.train_days), config.windows, config.mask_mode)
        if not config.use_masks:
            train_batch = train_batch.without_masks()
        test_batch = attribute_log(test_log, math.inf, config.windows)
    with _stage("train"):
        bundles = train_variants(config, train_batch)
    with _stage("evaluate"):
        ids = shard_ids(len(test_batch), config.shards, config.seed)
        evals = {v: evaluate_bundle(b, test_batch, ids, config.shards) for v, b in bundles.items()}
        report = make_report(evals)
    if out_dir is not None:
        with _stage("write"):
            out = Path(out_dir)
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            for v, b in bundles.items():
                save_checkpoint(b, out / "checkpoints" / f"{v}.ckpt", config.to_dict())
            (out / "report.tsv").write_text(report.to_tsv())
            (out / "report.txt").write_text(report.to_text())
            (out / "config.ini").write_text(config.to_ini())
    return ReplicationResult(config, report, bundles, truth, train_batch, test_batch)


def ecvr_truth_rate(result: ReplicationResult) -> float:
    t = result.test_batch
    return float(np.mean(result.truth.true_ecvr(t.log.features, t.log.click_time)))
