"""Named, reproducible random streams.

A run owns a single master seed. Every consumer of randomness (weight init,
device programming, read noise, fault injection, data synthesis, quadrature)
pulls from its own named child stream so that toggling one noise source never
shifts the draws of another.
"""
from __future__ import annotations

import zlib

import numpy as np

# Canonical stream names used across the package.
STREAMS = ("init", "program", "read", "faults", "data", "quadrature", "eval")


def _key(token: object) -> int:
    # Stable across processes; Python's hash() is salted and unusable here.
    return zlib.crc32(repr(token).encode("utf-8"))


def child_seed(master_seed: int, *names: object) -> np.random.SeedSequence:
    """Derive a child seed sequence from a master seed and a name path."""
    return np.random.SeedSequence((int(master_seed),) + tuple(_key(n) for n in names))


def stream(master_seed: int, *names: object) -> np.random.Generator:
    """Return the named child generator for a master seed.

    The same (seed, names) pair always yields a generator producing the same
    draws, independent of call order or process scheduling.
    """
    return np.random.default_rng(child_seed(master_seed, *names))


def hash_split_mask(n: int, seed: int = 20, test_frac: float = 0.2) -> np.ndarray:
    """Boolean test-split tags as a pure function of row index.

    Multiplicative hashing keeps the tag of row i independent of n, so
    growing a dataset never reshuffles the existing split.
    """
    idx = np.arange(n, dtype=np.uint64)
    h = (idx * np.uint64(2654435761) + np.uint64(seed) * np.uint64(0x9E3779B9)) \
        % np.uint64(2 ** 32)
    return (h.astype(np.float64) / 2 ** 32) < test_frac
