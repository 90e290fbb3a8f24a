"""Weight checkpoint container.

Byte layout (all integers little-endian)::

    0   8 bytes   magic  b"ACAMCKPT"
    8   uint32    format version (1)
    12  uint32    reserved, 0
    16  uint64    manifest length M in bytes
    24  M bytes   manifest: UTF-8 JSON, keys sorted, separators (",", ":")
        pad       zero bytes up to the next multiple of 8
        payload   raw tensors back to back, little-endian, C order

The manifest is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype",
"offset", "nbytes"}, ...]}`` where ``offset`` is relative to the payload
start. Tensors are written in insertion order, so equal inputs give equal
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACAMCKPT"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    mbytes = manifest.encode("utf-8")
    pad = (-(24 + len(mbytes))) % 8
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, 0, len(mbytes)))
        fh.write(mbytes)
        fh.write(b"\0" * pad)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, _, mlen = struct.unpack("<IIQ", buf[8:24])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(buf[24 : 24 + mlen].decode("utf-8"))
    start = 24 + mlen + ((-(24 + mlen)) % 8)
    tensors = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        raw = buf[lo : lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(e["dtype"])
    return tensors, manifest["meta"]
