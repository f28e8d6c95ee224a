"""Pinned, portable pseudo-random stream for reproducible audit plans.

All sampling in this package flows through :class:`SplitMix64` so that a
plan built from (file, config) is bit-identical across runs, platforms and
interpreter versions. The generator identity is stamped into result files.
"""

from __future__ import annotations

import hashlib

GENERATOR_ID = "splitmix64"

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit splitmix stream (Steele et al. "fast splittable" finalizer)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange requires n >= 1")
        # Largest multiple of n that fits in 64 bits; draws above it are
        # rejected so every residue is equally likely.
        limit = ((1 << 64) // n) * n
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(base_seed: int, *labels: str) -> int:
    """Stable 64-bit sub-seed for (base_seed, labels...).

    Used to give every file (and every synthetic backend call) its own
    independent stream while keeping the whole run a pure function of the
    manifest seed.
    """
    h = hashlib.sha256()
    h.update(str(base_seed & _MASK64).encode("utf-8"))
    for label in labels:
        h.update(b"\x00")
        h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")
