"""Versioned binary checkpoint of named float64 arrays.

Layout (little-endian)::

    b"GFCACKPT"  uint32 version  uint32 section_count
    per section: uint16 name_len, name (UTF-8), uint8 ndim, ndim x uint64 shape,
                 prod(shape) x float64 data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"GFCACKPT"
VERSION = 1


def save_checkpoint(path, sections: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise LoadError(f"{path}: not a gfca checkpoint")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    off, out = 16, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            out[name] = arr.astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise LoadError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise LoadError(f"{path}: {len(raw) - off} trailing bytes")
    return out
