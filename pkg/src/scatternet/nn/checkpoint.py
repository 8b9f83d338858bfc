"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic  b"SNCK"
    u8     format version
    u32    length of the UTF-8 JSON config record, then the record
    u32    tensor count
    per tensor:
        u16  name length, then the UTF-8 name
        u8   ndim, then ndim x u64 dims
        f8[] values, row-major, little-endian

Readers reject unknown versions rather than guessing.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SNCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: "OrderedDict[str, np.ndarray]", config: dict) -> None:
    record = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(record)))
        fh.write(record)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<B", _read(fh, 1))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read(fh, 4))
        config = json.loads(_read(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return tensors, config
