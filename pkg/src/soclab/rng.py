"""Named, seedable, splittable random streams.

Built on numpy's SeedSequence/PCG64. A stream is addressed by a name and an
integer (typically the iteration number), so consumers can draw in any order
without desynchronizing each other. Increment blocks are filled in C order,
which makes the values for trajectory i a pure function of (stream, i, K, d):
growing or shrinking the batch never changes the draws any fixed trajectory
index receives.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["RngStreams"]


def _name_key(name: str) -> int:
    # stable 32-bit key for a stream name; crc32 is deterministic across runs
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    """Factory of independent generators derived from one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str, index: int = 0) -> np.random.Generator:
        """Return the generator for stream (name, index), freshly positioned."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name), int(index)))
        return np.random.Generator(np.random.PCG64(ss))
