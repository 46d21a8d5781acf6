"""Deterministic seeded random numbers, bit-reproducible across platforms.

Algorithm: counter-based SplitMix64 (Steele et al., "Fast splittable
pseudorandom number generators") mixed per draw index, mapped to uniforms
via the top 53 bits, and to Gaussians via Box-Muller. Pure uint64
arithmetic with wraparound, so streams never depend on the numpy version
or the host platform.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _fnv1a(name: str) -> int:
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class SeededRng:
    """Deterministic random stream identified by (seed, draw counter)."""

    def __init__(self, seed: int):
        self._seed = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def derive(self, name: str) -> "SeededRng":
        """Independent child stream keyed by a stable name.

        Stable against the order in which siblings are derived, so adapter
        init does not depend on attach iteration order.
        """
        child = int(_mix(self._seed ^ _U64(_fnv1a(name))))
        return SeededRng(child)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = (self._raw(m) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (self._raw(m) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        u1 = np.maximum(u1, 2.0 ** -53)  # log(0) guard
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        pair = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return (std * pair[:n]).reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n) by rejection-free modulo of a 64-bit draw."""
        if n <= 0:
            raise ValueError("randint upper bound must be positive")
        return int(self._raw(1)[0] % _U64(n))

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, seq, k: int) -> list:
        pool = list(seq)
        self.shuffle(pool)
        return pool[:k]
