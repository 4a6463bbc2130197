"""Seeded random streams.

All randomness goes through :class:`numpy.random.Generator` backed by PCG64,
whose output is specified bit-for-bit and therefore reproducible across
platforms. Independent consumers (weight init, FWT sampling, data sampling,
...) get their own stream derived from a root seed and a consumer name, so
adding draws in one consumer never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return the generator for consumer path ``names`` under root ``seed``."""
    key = tuple(n if isinstance(n, int) else zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def child_seed(seed: int, *names: str | int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``names``."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))
