"""Seeded splitmix64 random number generator.

All sampling in this package goes through this generator instead of
``random`` / ``numpy.random`` so that corrupted datasets, model inits and
training runs are bit-identical across platforms and library versions.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = (h ^ byte) * _FNV_PRIME & _MASK
    return h


class SplitMix64:
    """Deterministic 64-bit generator with cheap labelled sub-streams."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def fork(self, label: str, index: int = 0) -> "SplitMix64":
        """Derive an independent stream; same (seed, label, index) -> same stream."""
        return SplitMix64(_mix(self._state ^ _fnv1a(label) ^ (index & _MASK)))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def _next_u64_array(self, n: int) -> np.ndarray:
        # splitmix outputs are a pure function of the counter, so a block of
        # draws can be produced vectorized and bit-identical to n next_u64 calls
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + np.uint64(_GAMMA) * steps
            self._state = int(z[-1]) if n else self._state
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform in [0, 1), using the top 53 bits of each draw."""
        return (self._next_u64_array(n) >> np.uint64(11)) * 2.0**-53

    def uniform_range(self, n: int, low: float, high: float) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        # u1 == 0 would send log to -inf; the 53-bit grid spacing is the floor
        u1 = np.maximum(u1, 2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return out[:n]

    def randint(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (2**64 // bound) * bound
        while True:
            draw = self.next_u64()
            if draw < threshold:
                return draw % bound

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self.shuffle(idx)
        return idx

    def sample(self, n: int, m: int) -> np.ndarray:
        """m distinct indices from [0, n), in draw order (partial Fisher-Yates)."""
        if not 0 <= m <= n:
            raise ValueError(f"cannot sample {m} of {n}")
        pool = np.arange(n)
        for i in range(m):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m].copy()
