"""SplitMix64 random stream.

The stream is counter based: the i-th output (0-based) is
``mix(seed + (i + 1) * GAMMA) mod 2**64``, so blocks of outputs can be
produced either one at a time or as a vectorised numpy batch and the two
agree bit for bit. ``mix`` is the finaliser from Steele, Lea & Flood (2014):

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    _CHUNK = 1 << 16

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.counter = 0  # outputs consumed so far
        self._buf: list[int] = []
        self._pos = 0

    def next_u64(self) -> int:
        if self._pos == len(self._buf):
            self._buf = splitmix_block(self.seed, self.counter, self._CHUNK).tolist()
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        self.counter += 1
        return x

    def below(self, n: int) -> int:
        """Integer in ``[0, n)`` by multiply-shift (bias < n / 2**64)."""
        return (self.next_u64() * n) >> 64

    def block(self, count: int) -> np.ndarray:
        """The next ``count`` outputs as a uint64 array; advances the stream."""
        start = self.counter
        self.counter += count
        self._buf, self._pos = [], 0
        return splitmix_block(self.seed, start, count)


def splitmix_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the stream for ``seed``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))
