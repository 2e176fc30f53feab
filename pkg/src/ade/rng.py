"""Seeded 64-bit SplitMix-style pseudo-random stream.

All randomness in the package flows through this generator so that runs
are reproducible bit-for-bit across platforms. The stream is counter
based: output i is a pure function of (seed, i), which also makes bulk
generation deterministic regardless of chunking.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic stream of 64-bit words with derived float helpers."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def spawn(self, salt: int) -> "SplitMix64":
        """Derive an independent child stream; used to give each consumer
        (init, batching, dropout, data synthesis) its own sequence."""
        return SplitMix64(_mix((self.seed + _GOLDEN * (int(salt) + 1)) & _MASK))

    def next_uint64(self) -> int:
        self._counter += 1
        return _mix((self.seed + _GOLDEN * self._counter) & _MASK)

    def uint64(self, n: int) -> np.ndarray:
        start = self._counter + 1
        self._counter += n
        idx = (np.arange(start, start + n, dtype=np.uint64) * np.uint64(_GOLDEN)
               + np.uint64(self.seed))
        z = idx
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape) -> np.ndarray:
        """Floats in [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniforms."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.maximum(self.uniform((m,)), 2.0**-53)
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                              r * np.sin(2.0 * np.pi * u2)])[:n]
        return (scale * out).reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Integers in [low, high) by rejection-free modular draw.

        The modulo bias is below 2**-40 for the ranges used here (< 2**20),
        which is acceptable for data synthesis and shuffling.
        """
        n = int(np.prod(shape)) if shape else 1
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        draws = self.uint64(n) % np.uint64(span)
        return (low + draws.astype(np.int64)).reshape(shape)

    def shuffle(self, n: int) -> np.ndarray:
        """A permutation of range(n) via seeded Fisher-Yates."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.next_uint64() % (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
