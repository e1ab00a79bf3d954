"""Portable tensor container: ``magic "XCAE" | version | JSON metadata | named
float32 tensors``. Used for trained models and detector calibrations."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"XCAE"
VERSION = 1


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            key = name.encode()
            fh.write(struct.pack("<HB", len(key), arr.ndim))
            fh.write(key)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a model container (magic {raw[:4]!r})")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 10
    meta = json.loads(raw[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", raw, pos)
        pos += 3
        name = raw[pos:pos + klen].decode()
        pos += klen
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, tensors
