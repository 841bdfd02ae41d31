"""Named, splittable counter-based random streams.

A stream is a Philox generator keyed by (seed, crc of the stream name), so
any stochastic step can be replayed bit-exactly without threading one global
generator through the code.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    b = name.encode("utf-8")
    return (zlib.crc32(b) << 32) | zlib.adler32(b)


def stream(seed: int, name: str) -> np.random.Generator:
    key = np.array([seed & _MASK64, _name_key(name)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Streams:
    """Factory of named streams below a common seed."""

    def __init__(self, seed: int, prefix: str = ""):
        self.seed = int(seed)
        self.prefix = prefix

    def get(self, name: str) -> np.random.Generator:
        return stream(self.seed, self.prefix + name)

    def child(self, name: str) -> "Streams":
        return Streams(self.seed, f"{self.prefix}{name}/")
