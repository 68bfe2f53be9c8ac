"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`generator`. A stream is
identified by ``(seed, tag, index)``; the triple is hashed into a Philox key so
that distinct purposes never share state and parallel cells can be evaluated
in any order with identical results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngSeed:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def child(self, tag: str, index: int = 0) -> "RngSeed":
        return RngSeed(self.seed, derive_stream(self.seed, tag, index, parent=self.stream))

    def generator(self) -> np.random.Generator:
        return _philox(self.seed, self.stream)


def derive_stream(seed: int, tag: str, index: int = 0, parent: int = 0) -> int:
    """Stream id = first 8 bytes of blake2b(seed, parent, tag, index)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little"))
    h.update(int(parent).to_bytes(8, "little"))
    h.update(tag.encode("utf-8"))
    h.update(int(index).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def _philox(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generator(seed: int | RngSeed, tag: str = "", index: int = 0) -> np.random.Generator:
    if isinstance(seed, RngSeed):
        base = seed
    else:
        base = RngSeed(int(seed))
    if tag:
        base = base.child(tag, index)
    return base.generator()
