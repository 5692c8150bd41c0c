"""
Phase-space state shared by the BPS and RHMC processes.

A PhasePoint is a position-velocity pair (x, v) in R^d x R^d.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from src.core.errors import DimensionMismatchError, DomainError, NumericalFailureError

if TYPE_CHECKING:
    from src.core.potentials import Potential


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if x.size < 1:
            raise DomainError("d", x.size, "d >= 1")
        if v.size != x.size:
            raise DimensionMismatchError(x.size, v.size, "velocity length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise NumericalFailureError("phase point has non-finite entries")
        x.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def dimension(self) -> int:
        return self.x.size

    def speed(self) -> float:
        return float(np.linalg.norm(self.v))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhasePoint):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.v, other.v)

    def __hash__(self) -> int:
        return hash((self.x.tobytes(), self.v.tobytes()))


def hamiltonian(p: "Potential", z: PhasePoint) -> float:
    """H(x, v) = U(x) + |v|^2 / 2."""
    if z.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z.dimension)
    return float(p.value(z.x)) + 0.5 * float(np.dot(z.v, z.v))
