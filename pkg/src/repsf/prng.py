"""Deterministic weight-initialization PRNG.

SplitMix64 over a 64-bit counter. The generator is fully specified by three
multiplicative/additive constants, so any implementation in any language can
reproduce the exact weight tensors from (seed, draw order):

    z      = seed + (counter+1) * 0x9E3779B97F4A7C15   (mod 2**64)
    z      = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z      = (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    out    = z ^ (z >> 31)
    u64 -> float64 in [0, 1): (out >> 11) * 2**-53

Draws always happen in float64 and are cast to the target dtype afterwards,
so float32 and float64 builds of the same seed share the same underlying
stream.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based SplitMix64 stream."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = self._seed + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n float64 draws from U[low, high)."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u


def fan_in_uniform(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """Uniform weights on [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn row-major."""
    bound = 1.0 / math.sqrt(fan_in)
    flat = rng.uniform(int(np.prod(shape)), -bound, bound)
    return flat.reshape(shape).astype(dtype)
