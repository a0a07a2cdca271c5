"""Versioned binary checkpoint: named, shape-tagged float64 arrays.

Layout: 8-byte magic, little-endian u32 header length, JSON header, then
the raw array payloads back to back. The header records each array's name,
shape and byte offset into the payload, so files are self-describing and
partial reads stay possible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDCP0001"


class CheckpointError(ValueError):
    pass


def save_arrays(arrays: dict, path: str | Path, extra: dict | None = None) -> None:
    """Write named arrays (Tensor or ndarray values) to ``path``."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        value = arrays[name]
        data = np.ascontiguousarray(
            getattr(value, "data", value), dtype="<f8"
        )
        entries.append({"name": name, "shape": list(data.shape), "offset": len(payload)})
        payload.extend(data.tobytes())
    header = {"version": 1, "arrays": entries}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> array, extra header fields)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = raw[12 + header_len:]
    out = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        out[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8"
        ).reshape(shape).copy()
    return out, header.get("extra", {})
