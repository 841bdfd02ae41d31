"""Binary checkpoint format.

Layout (little endian): magic b"HDLA", u32 version (=1), u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32
row-major payload.  Optimizer tensors are prefixed "opt.", EMA tensors "ema.".
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HDLA"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"file ends inside {what} at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"tensor {k} name length"))
        name = take(nlen, f"tensor {k} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"tensor {name!r} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name!r} dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"tensor {name!r} payload"), dtype="<f4")
        out[name] = data.astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def write(path, tensors: dict) -> None:
    Path(path).write_bytes(encode(tensors))


def read(path) -> dict:
    return decode(Path(path).read_bytes())


def narrow(arr: np.ndarray) -> np.ndarray:
    """Round-trip a float64 array through the float32 payload precision."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
