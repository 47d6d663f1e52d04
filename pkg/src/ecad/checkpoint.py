"""Binary checkpoint format.

    b"ECADCKPT\\n"
    <header: one line of canonical JSON (sorted keys), terminated by b"\\n">
    repeated parameter records:
        uint16 name length, name (utf-8)
        uint8 ndim, ndim x uint32 dims
        prod(dims) x float64
All integers and floats are little-endian. The header carries the format
version, variant, window config, net config, field cardinalities and an
echo of the experiment config that produced the file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attribution import WindowConfig
from .errors import DataError
from .models import ModelBundle, NetConfig, build

MAGIC = b"ECADCKPT\n"
FORMAT_VERSION = 1


def _header(bundle: ModelBundle, config_echo: dict | None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "variant": bundle.variant,
        "windows": bundle.windows.to_dict(),
        "net": bundle.net_config.to_dict(),
        "cardinalities": list(bundle.cardinalities),
        "config": config_echo or {},
        "params": [{"name": p.name, "shape": list(p.shape)} for p in bundle.params],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def dump_checkpoint(bundle: ModelBundle, config_echo: dict | None = None) -> bytes:
    parts = [MAGIC, _header(bundle, config_echo)]
    for p in bundle.params:
        name = p.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.values.ndim) + struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        parts.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(bundle: ModelBundle, path: str | Path, config_echo: dict | None = None) -> None:
    Path(path).write_bytes(dump_checkpoint(bundle, config_echo))


def parse_checkpoint(data: bytes) -> tuple[ModelBundle, dict]:
    if not data.startswith(MAGIC):
        raise DataError("not a checkpoint file (bad magic)")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise DataError("corrupt checkpoint header: no terminating newline")
    try:
        header = json.loads(data[len(MAGIC) : end])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"corrupt checkpoint header: {e}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version') if isinstance(header, dict) else None}")
    try:
        bundle = build(
            header["variant"],
            WindowConfig.from_dict(header["windows"]),
            header["cardinalities"],
            NetConfig.from_dict(header["net"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"corrupt checkpoint header: {e!r}") from None
    params = {p.name: p for p in bundle.params}
    pos = end + 1
    seen = set()
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            if name not in params or params[name].shape != tuple(shape):
                raise DataError(f"checkpoint parameter {name} {shape} does not fit variant {bundle.variant}")
            params[name].values[...] = values
            seen.add(name)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"truncated or corrupt checkpoint: {e}") from None
    missing = set(params) - seen
    if missing:
        raise DataError(f"checkpoint lacks parameters: {sorted(missing)}")
    bundle.meta = header
    return bundle, header


def load_checkpoint(path: str | Path) -> ModelBundle:
    return parse_checkpoint(Path(path).read_bytes())[0]
