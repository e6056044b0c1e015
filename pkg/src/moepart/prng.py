"""Counter-based SplitMix64 stream with a Box-Muller normal transform.

Output ``i`` (0-based) of a stream seeded with ``s`` is

    z = s + (i + 1) * 0x9E3779B97F4A7C15            (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Uniforms are ``(z >> 11) * 2**-53`` in [0, 1). Normal ``j`` consumes
uniforms ``2j`` and ``2j+1`` as ``sqrt(-2 log1p(-u0)) * cos(2 pi u1)``.
All arithmetic is wrapping 64-bit unsigned; only the final transcendental
step depends on the platform's libm.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def splitmix64_scalar(seed: int, i: int) -> int:
    """Reference scalar implementation of output ``i``."""
    z = (seed + (i + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = np.uint64(seed & MASK64)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = self.seed + i * GOLDEN
            z = (z ^ (z >> np.uint64(30))) * MIX1
            z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.uniform(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (r * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)
