"""Binary tensor checkpoints ("MTLC" format, version 1).

Layout (little-endian): magic ``MTLC``, u32 version, u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, f64 data.
"""

from __future__ import annotations

import struct

import numpy as np

from .fsutil import atomic_write

MAGIC = b"MTLC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not an MTLC checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointFormatError("truncated tensor name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(blob):
                raise CheckpointFormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def write(path: str, tensors: dict) -> None:
    """Atomically write ``tensors`` (name -> array) to ``path``."""
    atomic_write(path, encode(tensors))


def read(path: str) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())
