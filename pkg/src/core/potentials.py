"""
Target potentials U = -log density (up to a constant).

A Potential exposes value, gradient, optional Hessian bounds (m, M), an
optional Gaussian representation for closed-form dynamics, and an optional
exact event-time capability: the coefficients of the polynomial
t -> <grad U(x + t v), v> for potentials where that rate is polynomial.
"""

import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Hashable, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.special import comb, roots_legendre

from src.core.config import settings
from src.core.errors import DimensionMismatchError, DomainError, UnsupportedPotentialError
from src.core.logging import logger
from src.core.phase_space import PhasePoint
from src.core.rng import RngStream

HessianBounds = Tuple[float, float]


def _check_bounds(bounds: Optional[HessianBounds]) -> Optional[HessianBounds]:
    if bounds is None:
        return None
    m, M = float(bounds[0]), float(bounds[1])
    if not (0 < m <= M):
        raise DomainError("hessian_bounds", bounds, "0 < m <= M")
    return (m, M)


@dataclass(frozen=True)
class ScalarPotential:
    """One-dimensional potential u1 with vectorised value and derivatives."""
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    second_derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian_bounds: Optional[HessianBounds] = None
    power: Optional[float] = None   # set for the |x|^b / 2 family


def power_scalar(b: float) -> ScalarPotential:
    """u1(x) = |x|^b / 2 for b >= 2."""
    b = float(b)
    if b < 2:
        raise DomainError("b", b, "b >= 2")
    if b == 2:
        return ScalarPotential(
            name="power:2",
            value=lambda x: 0.5 * np.square(x),
            derivative=lambda x: np.asarray(x, dtype=float) * 1.0,
            second_derivative=lambda x: np.ones_like(np.asarray(x, dtype=float)),
            hessian_bounds=(1.0, 1.0),
            power=2.0,
        )
    return ScalarPotential(
        name=f"power:{b:g}",
        value=lambda x: 0.5 * np.abs(x) ** b,
        derivative=lambda x: 0.5 * b * np.sign(x) * np.abs(x) ** (b - 1),
        second_derivative=lambda x: 0.5 * b * (b - 1) * np.abs(x) ** (b - 2),
        hessian_bounds=None,
        power=b,
    )


class GaussianForm:
    """
    Gaussian representation U(x) = x^T H x / 2.

    The eigendecomposition of H is computed once and cached, so exact flows
    cost O(d^2) per call instead of O(d^3).
    """

    def __init__(self, precision: Optional[np.ndarray] = None, dimension: Optional[int] = None, scale: float = 1.0):
        if precision is None:
            if dimension is None:
                raise DomainError("dimension", dimension, "required for an isotropic Gaussian")
            if scale <= 0:
                raise DomainError("scale", scale, "scale > 0")
            self.isotropic = True
            self.scale = float(scale)
            self.dimension = int(dimension)
            self._precision = None
        else:
            H = np.array(precision, dtype=float)
            if H.ndim != 2 or H.shape[0] != H.shape[1]:
                raise DomainError("precision", H.shape, "square matrix")
            if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
                raise DomainError("precision", "asymmetric", "symmetric matrix")
            self.isotropic = False
            self.scale = None
            self.dimension = H.shape[0]
            self._precision = 0.5 * (H + H.T)

    @property
    def precision(self) -> np.ndarray:
        if self.isotropic:
            return self.scale * np.eye(self.dimension)
        return self._precision

    @cached_property
    def eigen(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.isotropic:
            return np.full(self.dimension, self.scale), np.eye(self.dimension)
        eigvals, eigvecs = np.linalg.eigh(self._precision)
        if eigvals[0] <= 0:
            raise DomainError("precision", float(eigvals[0]), "positive definite")
        return eigvals, eigvecs

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.isotropic:
            return self.scale * x
        return x @ self._precision.T if x.ndim > 1 else self._precision @ x

    def bounds(self) -> HessianBounds:
        eigvals, _ = self.eigen
        return float(eigvals[0]), float(eigvals[-1])


class Potential:
    """
    Negative log-density of a target on R^d.

    Usage example:
    ```python
    p = make_product_potential(power_scalar(4), d=10)
    z = sample_stationary(p, RngStream(seed=7))
    rate = bounce_rate(p, z)
    ```
    """

    def __init__(
        self,
        dimension: int,
        value: Callable[[np.ndarray], float],
        gradient: Callable[[np.ndarray], np.ndarray],
        hessian_bounds: Optional[HessianBounds] = None,
        *,
        name: str = "custom",
        gaussian: Optional[GaussianForm] = None,
        marginal: Optional[ScalarPotential] = None,
        rate_polynomial: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    ):
        if int(dimension) < 1:
            raise DomainError("d", dimension, "d >= 1")
        self.dimension = int(dimension)
        self._value = value
        self._gradient = gradient
        self.hessian_bounds = _check_bounds(hessian_bounds)
        self.name = name
        self.gaussian = gaussian
        self.marginal = marginal
        self._rate_polynomial = rate_polynomial

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dimension:
            raise DimensionMismatchError(self.dimension, x.shape[-1])
        return x

    def value(self, x: np.ndarray) -> float:
        return self._value(self._check(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self._gradient(self._check(x))

    @property
    def exact_event_sampler(self) -> bool:
        return self._rate_polynomial is not None

    def rate_polynomial(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Ascending coefficients of t -> <grad U(x + t v), v>."""
        if self._rate_polynomial is None:
            raise UnsupportedPotentialError("rate_polynomial", "an exact event sampler")
        return self._rate_polynomial(self._check(x), self._check(v))

    def __repr__(self) -> str:
        return f"Potential(name={self.name!r}, d={self.dimension})"


def make_gaussian_potential(precision: np.ndarray) -> Potential:
    form = GaussianForm(precision=precision)
    H = form.precision
    return Potential(
        dimension=form.dimension,
        value=lambda x: 0.5 * np.einsum("...i,...i->...", x, form.apply(x)),
        gradient=form.apply,
        hessian_bounds=form.bounds(),
        name="gaussian",
        gaussian=form,
        rate_polynomial=lambda x, v: np.array([float(np.dot(H @ x, v)), float(np.dot(H @ v, v))]),
    )


def make_isotropic_gaussian(d: int, scale: float = 1.0) -> Potential:
    """U(x) = scale * |x|^2 / 2; scale = 1 is the standard Gaussian."""
    form = GaussianForm(dimension=d, scale=scale)
    return Potential(
        dimension=d,
        value=lambda x: 0.5 * scale * np.einsum("...i,...i->...", x, x),
        gradient=lambda x: scale * x,
        hessian_bounds=(scale, scale),
        name="gaussian" if scale == 1.0 else f"gaussian:{scale:g}",
        gaussian=form,
        marginal=_quadratic_scalar(scale),
        rate_polynomial=lambda x, v: np.array([scale * float(np.dot(x, v)), scale * float(np.dot(v, v))]),
    )


def _quadratic_scalar(scale: float) -> ScalarPotential:
    if scale == 1.0:
        return power_scalar(2)
    return ScalarPotential(
        name=f"quadratic:{scale:g}",
        value=lambda x: 0.5 * scale * np.square(x),
        derivative=lambda x: scale * np.asarray(x, dtype=float),
        second_derivative=lambda x: np.full_like(np.asarray(x, dtype=float), scale),
        hessian_bounds=(scale, scale),
    )


def _power_rate_polynomial(b: int) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    # <grad U(x + t v), v> = (b/2) sum_i v_i (x_i + t v_i)^(b-1)
    degree = b - 1
    binomials = np.array([comb(degree, k, exact=True) for k in range(degree + 1)], dtype=float)

    def coefficients(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return 0.5 * b * binomials * np.array(
            [np.dot(v ** (k + 1), x ** (degree - k)) for k in range(degree + 1)]
        )

    return coefficients


def make_product_potential(u1: ScalarPotential, d: int) -> Potential:
    """U_d(x) = sum_i u1(x_i); Hessian bounds are inherited from u1."""
    if int(d) < 1:
        raise DomainError("d", d, "d >= 1")
    d = int(d)
    if u1.power == 2.0:
        return make_isotropic_gaussian(d)
    rate = None
    if u1.power is not None and float(u1.power).is_integer() and int(u1.power) % 2 == 0:
        rate = _power_rate_polynomial(int(u1.power))
    return Potential(
        dimension=d,
        value=lambda x: np.sum(u1.value(x), axis=-1),
        gradient=u1.derivative,
        hessian_bounds=u1.hessian_bounds,
        name=f"product[{u1.name}]",
        marginal=u1,
        rate_polynomial=rate,
    )


def make_power_potential(b: float, d: int) -> Potential:
    """d-fold product of u1(x) = |x|^b / 2."""
    return make_product_potential(power_scalar(b), d)


class InverseCdfSampler:
    """
    Exact-stationarity sampler for a one-dimensional density exp(-u1).

    The support is truncated to [lo, hi] where each tail carries less than
    QUADRATURE_TAIL_MASS of the total mass (adaptive quadrature), the CDF is
    tabulated cell by cell with 8-point Gauss-Legendre, and draws invert the
    table with linear interpolation inside a cell.
    """

    def __init__(self, u1: ScalarPotential, tail_mass: Optional[float] = None, cells: Optional[int] = None):
        self.u1 = u1
        self.tail_mass = tail_mass if tail_mass is not None else settings.QUADRATURE_TAIL_MASS
        self.cells = cells if cells is not None else settings.INVERSE_CDF_CELLS
        density = lambda x: float(np.exp(-u1.value(x)))
        self.normalizer, _ = integrate.quad(density, -np.inf, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        self.lo = -self._tail_cutoff(density, direction=-1.0)
        self.hi = self._tail_cutoff(density, direction=1.0)
        edges = np.linspace(self.lo, self.hi, self.cells + 1)
        nodes, weights = roots_legendre(8)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        points = mid[:, None] + half[:, None] * nodes[None, :]
        masses = half * (np.exp(-u1.value(points)) @ weights)
        cdf = np.concatenate([[0.0], np.cumsum(masses)])
        self.edges = edges
        self.cdf = cdf / cdf[-1]
        logger.debug(
            f"Inverse-CDF table for {u1.name}: support [{self.lo:.4g}, {self.hi:.4g}], {self.cells} cells"
        )

    def _tail_cutoff(self, density: Callable[[float], float], direction: float) -> float:
        R = 1.0
        while True:
            if direction > 0:
                tail, _ = integrate.quad(density, R, np.inf, epsabs=0, epsrel=1e-8)
            else:
                tail, _ = integrate.quad(density, -np.inf, -R, epsabs=0, epsrel=1e-8)
            if tail < self.tail_mass * self.normalizer:
                return R
            R *= 1.25

    def moment(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Quadrature value of E[f(X)] under exp(-u1) (an oracle for tests and checks)."""
        num, _ = integrate.quad(lambda x: float(f(np.array(x)) * np.exp(-self.u1.value(x))),
                                -np.inf, np.inf, epsrel=1e-12, limit=200)
        return num / self.normalizer

    def sample(self, rng: RngStream, size) -> np.ndarray:
        u = rng.uniform(size)
        idx = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, self.cells - 1)
        lo_cdf = self.cdf[idx]
        width = self.cdf[idx + 1] - lo_cdf
        frac = np.where(width > 0, (u - lo_cdf) / np.where(width > 0, width, 1.0), 0.5)
        return self.edges[idx] + frac * (self.edges[idx + 1] - self.edges[idx])


_inverse_cdf_samplers: Dict[Hashable, InverseCdfSampler] = {}
_inverse_cdf_lock = threading.Lock()


def _sampler_key(u1: ScalarPotential) -> Hashable:
    # the |x|^b / 2 family is identified by b; anything else by the potential itself
    return ("power", float(u1.power)) if u1.power is not None else u1


def get_inverse_cdf_sampler(u1: ScalarPotential) -> InverseCdfSampler:
    """Return the cached inverse-CDF sampler for `u1` (built on first use, safe across worker threads)."""
    key = _sampler_key(u1)
    with _inverse_cdf_lock:
        sampler = _inverse_cdf_samplers.get(key)
        if sampler is None:
            sampler = _inverse_cdf_samplers[key] = InverseCdfSampler(u1)
    return sampler


def sample_stationary_positions(p: Potential, n: int, rng: RngStream) -> np.ndarray:
    """n independent draws of x ~ exp(-U), shape (n, d)."""
    d = p.dimension
    if p.gaussian is not None:
        xi = rng.standard_normal((n, d))
        if p.gaussian.isotropic:
            return xi / np.sqrt(p.gaussian.scale)
        eigvals, eigvecs = p.gaussian.eigen
        return (xi / np.sqrt(eigvals)) @ eigvecs.T
    if p.marginal is not None:
        return get_inverse_cdf_sampler(p.marginal).sample(rng, (n, d))
    raise UnsupportedPotentialError("sample_stationary", "a Gaussian form or a 1-D product marginal")


def sample_stationary_batch(p: Potential, n: int, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """n independent draws of (x, v) ~ exp(-U(x)) N(v; 0, I), each of shape (n, d)."""
    x = sample_stationary_positions(p, n, rng)
    v = rng.standard_normal((n, p.dimension))
    return x, v


def sample_stationary(p: Potential, rng: RngStream) -> PhasePoint:
    x, v = sample_stationary_batch(p, 1, rng)
    return PhasePoint(x[0], v[0])


def make_target(name: str, d: int) -> Potential:
    """Target from its command-line name: 'gaussian' or 'power:<b>'."""
    if name == "gaussian":
        return make_isotropic_gaussian(d)
    if name.startswith("power:"):
        try:
            b = float(name.split(":", 1)[1])
        except ValueError:
            raise DomainError("target", name, "power:<b> with numeric b") from None
        return make_power_potential(b, d)
    raise DomainError("target", name, "gaussian or power:<b>")
