"""
Counter-based random streams.

A stream is addressed by (seed, stream_id) and backed by numpy's Philox
generator, whose 128-bit key is built from the pair. Replicate i of an
experiment uses stream_id = base + i, so ensembles are reproducible no matter
how they are scheduled.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = ((self.stream_id & _MASK64) << 64) | (self.seed & _MASK64)
        self._generator = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, offset: int) -> "RngStream":
        """Independent stream sharing the seed, shifted by `offset` stream ids."""
        return RngStream(self.seed, self.stream_id + offset)

    def standard_normal(self, size: Optional[Union[int, Tuple[int, ...]]] = None):
        return self._generator.standard_normal(size)

    def exponential(self, size: Optional[Union[int, Tuple[int, ...]]] = None):
        return self._generator.standard_exponential(size)

    def uniform(self, size: Optional[Union[int, Tuple[int, ...]]] = None):
        return self._generator.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)


def batch_sizes(n: int, d: int, max_entries: int = 2_000_000):
    """Split n draws of dimension d into batches holding at most max_entries numbers."""
    size = max(1, max_entries // max(d, 1))
    for start in range(0, n, size):
        yield min(size, n - start)
