"""Deterministic random stream for verification inputs.

One splitmix-style 64-bit mixer drives every random tensor the toolkit
generates, so a single seed reproduces a verify run exactly.
"""

from __future__ import annotations

from .dtypes import DataType

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_int(self, lo: int, hi: int) -> int:
        """Uniform-ish integer in [lo, hi]."""
        return lo + self.next_u64() % (hi - lo + 1)

    def element(self, dtype: DataType) -> int:
        return dtype.wrap(self.next_u64())

    def elements(self, dtype: DataType, count: int) -> list[int]:
        return [self.element(dtype) for _ in range(count)]
