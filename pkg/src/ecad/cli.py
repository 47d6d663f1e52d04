"""Command-line entry point: ``ecad <subcommand>``.

    simulate   generate the click log of the configured horizon
    attribute  label a click log at the end of a day (or at infinity)
    train      fit one variant on an attributed file and write a checkpoint
    evaluate   score checkpoints on an attributed test file and print a report
    replicate  simulate, attribute, train every variant and evaluate
               (without --config it runs the replication preset)

Every subcommand accepts ``--config`` (INI file), ``--seed`` (overrides the
config seed) and ``--out``. Log verbosity follows ``ECAD_LOG_LEVEL``
(DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attribution import attribute_log, day_of, end_of_day
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, replication_preset
from .dataio import load_attributed, load_events, save_attributed, save_events
from .errors import ConfigError, DataError, EcadError
from .models import VARIANTS
from .pipeline import replicate, train_variants
from .report import evaluate_bundle, make_report, shard_ids
from .simulator import build_ground_truth, simulate

LOG_ENV = "ECAD_LOG_LEVEL"
log = logging.getLogger("ecad")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"{LOG_ENV}={level!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _variants(arg: list[str] | None) -> tuple[str, ...] | None:
    if not arg:
        return None
    out = []
    for chunk in arg:
        out.extend(v.strip().upper() for v in chunk.split(",") if v.strip())
    unknown = [v for v in out if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants: {', '.join(unknown)} (known: {', '.join(VARIANTS)})")
    return tuple(out)


def _config(args, default: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = load_config(args.config, default)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    variants = _variants(getattr(args, "variant", None))
    if variants:
        cfg = replace(cfg, variants=variants)
    return cfg


def _out_path(args, default: str) -> Path:
    path = Path(args.out or default)
    if path.parent and not path.parent.exists():
        raise DataError(f"output directory {path.parent} does not exist")
    return path


def cmd_simulate(args) -> int:
    cfg = _config(args)
    events = simulate(cfg.sim, build_ground_truth(cfg.sim))
    out = _out_path(args, "events.txt")
    try:
        save_events(events, out)
    except OSError as e:
        raise DataError(f"cannot write {out}: {e}") from None
    for name, value in events.counts().items():
        print(f"{name}\t{value}")
    return 0


def cmd_attribute(args) -> int:
    cfg = _config(args)
    events = load_events(args.events)
    days = day_of(events.click_time)
    if args.cutoff_day is None:
        cutoff = math.inf
        keep = np.ones(len(events), dtype=bool)
    else:
        cutoff = end_of_day(args.cutoff_day)
        keep = days <= args.cutoff_day
    if args.first_day is not None:
        keep &= days >= args.first_day
    if args.last_day is not None:
        keep &= days <= args.last_day
    batch = attribute_log(events.subset(keep), cutoff, cfg.windows, cfg.mask_mode)
    out = _out_path(args, "attributed.txt")
    try:
        save_attributed(batch, cfg.mask_mode, out)
    except OSError as e:
        raise DataError(f"cannot write {out}: {e}") from None
    determined = {k: int(m.sum()) for k, m in batch.masks.items() if k in ("y", "z", "y&z")}
    print(f"samples\t{len(batch)}")
    for k, v in determined.items():
        print(f"determined_{k}\t{v}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    variants = _variants(args.variant)
    if not variants or len(variants) != 1:
        raise ConfigError("train needs exactly one --variant")
    batch, mode = load_attributed(args.data)
    if batch.windows != cfg.windows:
        raise ConfigError("attributed file was built with a different window config than --config")
    if not cfg.use_masks:
        batch = batch.without_masks()
    cfg = replace(cfg, variants=variants)
    bundle = train_variants(cfg, batch)[variants[0]]
    out = _out_path(args, f"{variants[0]}.ckpt")
    try:
        save_checkpoint(bundle, out, cfg.to_dict())
    except OSError as e:
        raise DataError(f"cannot write {out}: {e}") from None
    log.info("trained %s on %d samples (mask mode %s)", variants[0], len(batch), mode)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    test, _ = load_attributed(args.data)
    bundles = {}
    for path in args.checkpoints:
        bundle = load_checkpoint(path)
        if bundle.variant in bundles:
            raise ConfigError(f"two checkpoints for variant {bundle.variant}")
        bundles[bundle.variant] = bundle
    ids = shard_ids(len(test), cfg.shards, cfg.seed)
    evals = {v: evaluate_bundle(b, test, ids, cfg.shards) for v, b in bundles.items()}
    report = make_report(evals)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report.to_tsv())
        (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def cmd_replicate(args) -> int:
    cfg = _config(args, replication_preset())
    result = replicate(cfg, args.out or "replication")
    sys.stdout.write(result.report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecad", description="Cascade delayed-feedback ECVR laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--config", help="INI experiment config (defaults embedded when omitted)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("simulate", help="generate a click log")
    common(p, "events file to write (default events.txt)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attribute", help="attribute a click log at a cutoff")
    common(p, "attributed file to write (default attributed.txt)")
    p.add_argument("--events", required=True, help="events file from 'simulate'")
    p.add_argument("--cutoff-day", type=int, help="attribute at the end of this day (default: infinity)")
    p.add_argument("--first-day", type=int, help="drop clicks before this day")
    p.add_argument("--last-day", type=int, help="drop clicks after this day")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("train", help="train one variant")
    common(p, "checkpoint to write (default <VARIANT>.ckpt)")
    p.add_argument("--data", required=True, help="attributed training file")
    p.add_argument("--variant", action="append", help="variant to train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate checkpoints on an attributed test file")
    common(p, "directory for report.tsv and report.txt")
    p.add_argument("--data", required=True, help="attributed test file (cutoff infinity)")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replicate", help="full synthetic replication")
    common(p, "output directory (default ./replication)")
    p.add_argument("--variant", action="append", help="restrict to these variants (repeat or comma separate)")
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except EcadError as e:
        print(f"ecad: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
