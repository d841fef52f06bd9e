"""Seeded counter-based random streams.

Each consumer gets its own ``(seed, stream_id)`` pair, which keys a Philox
generator. Philox output depends only on the key and counter, so draws are
identical across runs and platforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        """A derived stream; ``stream_id`` is mixed into this stream's id."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + stream_id + 1) & _MASK64
        return RngStream(self.seed, mixed)


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RngStream(seed, stream_id).generator()
