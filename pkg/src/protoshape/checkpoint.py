"""Deterministic binary store for named float64 arrays.

Layout: magic ``PSCK1\\n``, u32 little-endian header length, a canonical JSON
header (``meta`` plus name, shape and byte offset of each array, sorted by
name), then the concatenated little-endian float64 blobs. Identical inputs
give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSCK1\n"


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries, "nbytes": offset},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def loads(raw: bytes, where: str = "checkpoint"):
    """Inverse of :func:`dumps`; returns ``(arrays, meta)``."""
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 4:
        raise OSError(f"{where}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as e:
        raise OSError(f"{where}: corrupt header ({e})") from e
    body = raw[start + hlen:]
    if len(body) != header["nbytes"]:
        raise OSError(f"{where}: expected {header['nbytes']} data bytes, found {len(body)}")
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(arrays, meta))


def load(path):
    return loads(Path(path).read_bytes(), str(path))
