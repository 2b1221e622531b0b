"""Seeded random streams.

Every consumer (weight init, dropout, augmentation, shuffling, ...) draws from
its own named sub-stream derived from one integer seed. Streams are PCG64
generators keyed through ``numpy.random.SeedSequence``; the state transitions
are pure integer arithmetic, so a given seed yields the same draws everywhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RandomState:
    """Root of the named sub-stream tree for one run."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        """Fresh generator for sub-stream ``name`` (optionally indexed by ``keys``).

        Calling twice with the same arguments gives two generators that produce
        identical sequences.
        """
        ss = np.random.SeedSequence(self.seed, spawn_key=(_name_key(name), *map(int, keys)))
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RandomState(seed={self.seed})"
