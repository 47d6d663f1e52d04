"""Line-oriented text formats for event logs and attributed datasets.

Event file::

    # ecad-events v1 fields=<F>
    <click_time> <w> <v> 0:<index> 1:<index> ... <F-1>:<index>

Attributed file::

    # ecad-attributed v1 fields=<F>
    # cutoff <float or inf>
    # mask_mode <event|window>
    # windows <canonical JSON of the WindowConfig>
    # labels <comma separated label keys, bit 0 first>
    # matured <comma separated maturity keys, bit 0 first>
    <click_time> <w> <v> <labels hex> <masks hex> <matured hex> 0:<index> ...

Floats are written with ``repr`` so they read back bit-exact; ``inf`` marks a
conversion or refund that never happens. Fields are space separated, blank
lines are not allowed, and lines starting with ``#`` after the header block
are rejected. Parse errors name the offending line.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .attribution import MASK_MODES, LabeledBatch, WindowConfig
from .errors import DataError
from .simulator import EventLog

EVENTS_MAGIC = "# ecad-events v1"
ATTRIBUTED_MAGIC = "# ecad-attributed v1"
MATURED_KEYS = ("conversion", "refund", "cascade", "converted")


def _fmt_float(x: float) -> str:
    return "inf" if math.isinf(x) and x > 0 else repr(float(x))


def _parse_float(tok: str, what: str, lineno: int) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise DataError(f"line {lineno}: {what} is not a number: {tok!r}") from None
    if math.isnan(x) or x == -math.inf:
        raise DataError(f"line {lineno}: {what} must be finite or inf, got {tok!r}")
    return x


def _event_cells(log: EventLog, i: int) -> list[str]:
    return [_fmt_float(log.click_time[i]), _fmt_float(log.w[i]), _fmt_float(log.v[i])]


def _feature_cells(row: np.ndarray) -> str:
    return " ".join(f"{k}:{int(x)}" for k, x in enumerate(row))


def _parse_features(tokens: list[str], num_fields: int, lineno: int) -> list[int]:
    if len(tokens) != num_fields:
        raise DataError(f"line {lineno}: expected {num_fields} field:index pairs, got {len(tokens)}")
    out = []
    for k, tok in enumerate(tokens):
        fid, sep, idx = tok.partition(":")
        if not sep or not fid.isdigit() or not idx.isdigit():
            raise DataError(f"line {lineno}: malformed field:index pair {tok!r}")
        if int(fid) != k:
            raise DataError(f"line {lineno}: expected field {k}, got {fid}")
        out.append(int(idx))
    return out


def _check_event(click: float, w: float, v: float, lineno: int) -> None:
    if math.isinf(click):
        raise DataError(f"line {lineno}: click_time must be finite")
    if w <= 0 or v <= 0:
        raise DataError(f"line {lineno}: delays must be positive")
    if math.isinf(w) and not math.isinf(v):
        raise DataError(f"line {lineno}: refund without conversion")


def _header_fields(line: str, magic: str) -> int:
    if not line.startswith(magic):
        raise DataError(f"line 1: expected header {magic!r}, got {line[:40]!r}")
    rest = line[len(magic) :].strip()
    if not rest.startswith("fields="):
        raise DataError("line 1: header lacks fields=<F>")
    try:
        return int(rest[len("fields=") :])
    except ValueError:
        raise DataError(f"line 1: bad field count {rest!r}") from None


# --- events -----------------------------------------------------------------


def write_events(log: EventLog, out: TextIO) -> None:
    out.write(f"{EVENTS_MAGIC} fields={log.features.shape[1]}\n")
    for i in range(len(log)):
        out.write(" ".join(_event_cells(log, i)) + " " + _feature_cells(log.features[i]) + "\n")


def save_events(log: EventLog, path: str | Path) -> None:
    with open(path, "w") as f:
        write_events(log, f)


def read_events(lines: Iterable[str]) -> EventLog:
    it = iter(lines)
    first = next(it, None)
    if first is None:
        raise DataError("empty events file")
    num_fields = _header_fields(first.rstrip("\n"), EVENTS_MAGIC)
    feats, cols = [], []
    for lineno, line in enumerate(it, start=2):
        tokens = line.split()
        if len(tokens) < 3 or tokens[0].startswith("#"):
            raise DataError(f"line {lineno}: expected click_time w v followed by field:index pairs")
        click = _parse_float(tokens[0], "click_time", lineno)
        w = _parse_float(tokens[1], "w", lineno)
        v = _parse_float(tokens[2], "v", lineno)
        _check_event(click, w, v, lineno)
        feats.append(_parse_features(tokens[3:], num_fields, lineno))
        cols.append((click, w, v))
    arr = np.array(cols, dtype=np.float64).reshape(-1, 3)
    return EventLog(np.array(feats, dtype=np.int64).reshape(-1, num_fields), arr[:, 0], arr[:, 1], arr[:, 2])


def load_events(path: str | Path) -> EventLog:
    try:
        with open(path) as f:
            return read_events(f)
    except OSError as e:
        raise DataError(f"cannot read events file {path}: {e}") from None


# --- attributed datasets ------------------------------------------------------


def _bits(columns: list[np.ndarray]) -> np.ndarray:
    out = np.zeros(len(columns[0]) if columns else 0, dtype=object)
    for k, col in enumerate(columns):
        out = out + (col.astype(np.int64).astype(object) << k)
    return out


def write_attributed(batch: LabeledBatch, mask_mode: str, out: TextIO) -> None:
    log = batch.log
    keys = list(batch.labels)
    matured_keys = [k for k in MATURED_KEYS if k in batch.matured]
    out.write(f"{ATTRIBUTED_MAGIC} fields={log.features.shape[1]}\n")
    out.write(f"# cutoff {_fmt_float(batch.cutoff)}\n")
    out.write(f"# mask_mode {mask_mode}\n")
    out.write(f"# windows {json.dumps(batch.windows.to_dict(), sort_keys=True, separators=(',', ':'))}\n")
    out.write(f"# labels {','.join(keys)}\n")
    out.write(f"# matured {','.join(matured_keys)}\n")
    lab = _bits([batch.labels[k] for k in keys])
    msk = _bits([batch.masks[k] for k in keys])
    mat = _bits([batch.matured[k] for k in matured_keys]) if matured_keys else np.zeros(len(log), dtype=object)
    for i in range(len(log)):
        cells = _event_cells(log, i) + [f"{lab[i]:x}", f"{msk[i]:x}", f"{mat[i]:x}"]
        out.write(" ".join(cells) + " " + _feature_cells(log.features[i]) + "\n")


def save_attributed(batch: LabeledBatch, mask_mode: str, path: str | Path) -> None:
    with open(path, "w") as f:
        write_attributed(batch, mask_mode, f)


def _meta_line(line: str | None, key: str, lineno: int) -> str:
    prefix = f"# {key} "
    if line is None or not line.startswith(prefix):
        raise DataError(f"line {lineno}: expected '# {key} ...' header line")
    return line[len(prefix) :].rstrip("\n")


def read_attributed(lines: Iterable[str]) -> tuple[LabeledBatch, str]:
    """Parse an attributed file; returns the batch and the mask mode it was built with."""
    it = iter(lines)
    first = next(it, None)
    if first is None:
        raise DataError("empty attributed file")
    num_fields = _header_fields(first.rstrip("\n"), ATTRIBUTED_MAGIC)
    cutoff = _parse_float(_meta_line(next(it, None), "cutoff", 2), "cutoff", 2)
    mask_mode = _meta_line(next(it, None), "mask_mode", 3)
    if mask_mode not in MASK_MODES:
        raise DataError(f"line 3: unknown mask mode {mask_mode!r}")
    try:
        windows = WindowConfig.from_dict(json.loads(_meta_line(next(it, None), "windows", 4)))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"line 4: bad windows header: {e}") from None
    keys = _meta_line(next(it, None), "labels", 5).split(",")
    matured_keys = [k for k in _meta_line(next(it, None), "matured", 6).split(",") if k]
    if keys != windows.label_keys():
        raise DataError("line 5: label keys do not match the window config")
    unknown = set(matured_keys) - set(MATURED_KEYS)
    if unknown:
        raise DataError(f"line 6: unknown maturity keys {sorted(unknown)}")

    feats, cols, bitrows = [], [], []
    for lineno, line in enumerate(it, start=7):
        tokens = line.split()
        if len(tokens) < 6 or tokens[0].startswith("#"):
            raise DataError(f"line {lineno}: expected click_time w v labels masks matured followed by features")
        click = _parse_float(tokens[0], "click_time", lineno)
        w = _parse_float(tokens[1], "w", lineno)
        v = _parse_float(tokens[2], "v", lineno)
        _check_event(click, w, v, lineno)
        if click > cutoff:
            raise DataError(f"line {lineno}: click at {click} is after cutoff {cutoff}")
        try:
            bits = [int(tok, 16) for tok in tokens[3:6]]
        except ValueError:
            raise DataError(f"line {lineno}: bitfields must be hexadecimal") from None
        if bits[0] & ~bits[1]:
            raise DataError(f"line {lineno}: label bit set on an undetermined label")
        if bits[0] >> len(keys) or bits[1] >> len(keys) or bits[2] >> len(matured_keys):
            raise DataError(f"line {lineno}: bitfield has bits beyond the declared keys")
        feats.append(_parse_features(tokens[6:], num_fields, lineno))
        cols.append((click, w, v))
        bitrows.append(bits)

    arr = np.array(cols, dtype=np.float64).reshape(-1, 3)
    log = EventLog(np.array(feats, dtype=np.int64).reshape(-1, num_fields), arr[:, 0], arr[:, 1], arr[:, 2])
    packed = [[b[j] for b in bitrows] for j in range(3)]

    def unpack(values: list[int], k: int) -> np.ndarray:
        return np.array([(x >> k) & 1 for x in values], dtype=bool)

    labels = {key: unpack(packed[0], k) for k, key in enumerate(keys)}
    masks = {key: unpack(packed[1], k) for k, key in enumerate(keys)}
    matured = {key: unpack(packed[2], k) for k, key in enumerate(matured_keys)}
    return LabeledBatch(log, cutoff, windows, labels, masks, matured), mask_mode


def load_attributed(path: str | Path) -> tuple[LabeledBatch, str]:
    try:
        with open(path) as f:
            return read_attributed(f)
    except OSError as e:
        raise DataError(f"cannot read attributed file {path}: {e}") from None
