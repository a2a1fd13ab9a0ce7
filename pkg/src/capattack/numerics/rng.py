"""Deterministic random number helpers.

Parameter initialization uses a self-contained splitmix64 stream so that
checkpoints are reproducible bit-for-bit across platforms and numpy
versions.  Everything else (data jitter, target sampling) uses seeded
``numpy.random.Generator`` instances created at the call site.
"""

import numpy as np

_MASK = (1 << 64) - 1


class SplitMix64:
    """splitmix64 sequence; `uniform` yields doubles with 53 random bits."""

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return (z ^ (z >> 31)) & _MASK

    def next_double(self) -> float:
        # top 53 bits -> [0, 1)
        return (self.next_u64() >> 11) * (2.0**-53)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [low + (high - low) * self.next_double() for _ in range(n)]
        return np.asarray(vals, dtype=np.float64).reshape(shape)
