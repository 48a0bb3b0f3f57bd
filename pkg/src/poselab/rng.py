"""Deterministic splitmix64 random number generation.

Every random choice in the repository (scene layout, pose sampling, weight
init, shuffling, experiment noise) flows through SplitMix64 so that runs are
bit-reproducible across platforms. Child streams are derived from the
constructor seed and an index only, never from how much the parent has been
consumed, which keeps per-sample work order-independent.
"""
from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """splitmix64 stream with scalar and vectorized draws."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self._state = self.seed

    def spawn(self, index: int) -> "SplitMix64":
        """Child stream determined by (constructor seed, index) alone."""
        return SplitMix64(_mix((self.seed ^ _GOLDEN) + _GOLDEN * (index + 1)))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def uniform(self) -> float:
        """Uniform draw in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniforms(self, n: int) -> np.ndarray:
        ks = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + np.uint64(_GOLDEN) * ks
            vals = _mix_array(states)
        self._state = (self._state + _GOLDEN * n) & _MASK
        return (vals >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, sigma: float = 1.0) -> float:
        # Box-Muller, cosine branch only; 1-u keeps the log argument in (0, 1].
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, sigma: float = 1.0) -> np.ndarray:
        u1 = 1.0 - self.uniforms(n)
        u2 = self.uniforms(n)
        return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def unit_vector(self, dim: int = 3) -> np.ndarray:
        v = self.normals(dim)
        n = float(np.linalg.norm(v))
        while n < 1e-12:
            v = self.normals(dim)
            n = float(np.linalg.norm(v))
        return v / n
