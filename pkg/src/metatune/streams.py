"""Named, reproducible random streams derived from one top-level seed.

Every consumer of randomness asks for a stream by a path of names and
integers, e.g. ``stream(seed, "metatune", "loss", episode, trial)``.  The
path is hashed into a :class:`numpy.random.SeedSequence`, so the stream a
trial sees does not depend on how many draws other trials made or on the
order in which trials are executed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key integers must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for ``path`` under ``seed``."""
    entropy = [_key(seed)] + [_key(p) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for handing to a sub-component."""
    return int(rng.integers(0, 2**63 - 1))
