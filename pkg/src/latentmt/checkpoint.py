"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"LMT1"
    version u32      currently 1
    metalen u64      length of the UTF-8 JSON metadata blob
    meta    bytes    JSON object (model config, vocabularies, train state)
    count   u64      number of array entries
    entry*  repeated:
        namelen u16
        name    UTF-8 bytes
        ndim    u8
        dims    ndim x u64
        payload prod(dims) x float64 little-endian, row-major

Every parameter, and optionally optimizer state, is one named entry.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LMT1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, arrays: dict, meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8").tobytes())


def load(path) -> tuple[dict, dict]:
    """Returns (arrays, meta); raises CheckpointError on malformed files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: {path}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (metalen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(metalen).decode("utf-8"))
    (count,) = struct.unpack("<Q", take(8))
    arrays = {}
    for _ in range(count):
        (namelen,) = struct.unpack("<H", take(2))
        name = take(namelen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack("<" + "Q" * ndim, take(8 * ndim))
        n = 1
        for d in dims:
            n *= d
        payload = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        arrays[name] = payload.reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return arrays, meta
