"""
Bouncy Particle Sampler: exact event-driven simulation.

Between events the particle moves linearly, x(t) = x + t v. Two jump
mechanisms compete:
- Bounce at the inhomogeneous rate <grad U(x), v>_+, reflecting v on the
  hyperplane orthogonal to grad U.
- Refresh at the homogeneous rate lambda_ref, with the autoregressive update
  v -> alpha v + sqrt(1 - alpha^2) xi.

Bounce times are drawn by closed-form inversion for Gaussian targets, by
polynomial-rate inversion when the potential advertises an exact event
sampler, and by Poisson thinning against a linear envelope otherwise.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import brentq

from src.core.config import settings
from src.core.errors import (
    DegenerateBounceError,
    DimensionMismatchError,
    DomainError,
    NumericalFailureError,
    UnsupportedPotentialError,
)
from src.core.logging import logger
from src.core.phase_space import PhasePoint
from src.core.potentials import Potential
from src.core.rng import RngStream
from src.db.models import BpsConfig


class EventKind(Enum):
    BOUNCE = "Bounce"
    REFRESH = "Refresh"


class Dynamics(Enum):
    LINEAR = "Linear"
    HAMILTONIAN_FLOW = "HamiltonianFlow"


@dataclass(frozen=True)
class PathSkeleton:
    """
    Exact continuous-time trajectory: event times, kinds and post-event states.

    `propagator(z, s)` advances a state by s time units under the segment
    dynamics; it is None for linear motion.
    """
    t0: float
    z0: PhasePoint
    times: np.ndarray
    kinds: Tuple[EventKind, ...]
    xs: np.ndarray
    vs: np.ndarray
    dynamics: Dynamics
    horizon: float
    propagator: Optional[Callable[[PhasePoint, float], PhasePoint]] = field(default=None, compare=False)
    meta: Dict[str, object] = field(default_factory=dict, compare=False)

    @property
    def dimension(self) -> int:
        return self.z0.dimension

    @property
    def n_events(self) -> int:
        return len(self.times)

    @property
    def events(self) -> List[Tuple[float, EventKind, PhasePoint]]:
        return [
            (float(t), kind, PhasePoint(x, v))
            for t, kind, x, v in zip(self.times, self.kinds, self.xs, self.vs)
        ]

    def count(self, kind: EventKind) -> int:
        return sum(1 for k in self.kinds if k is kind)

    def segment_starts(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Start times, positions and velocities of every segment (z0 first)."""
        starts = np.concatenate([[self.t0], self.times])
        xs = np.vstack([self.z0.x[None, :], self.xs]) if self.n_events else self.z0.x[None, :]
        vs = np.vstack([self.z0.v[None, :], self.vs]) if self.n_events else self.z0.v[None, :]
        return starts, xs, vs


def bounce_reflect(grad: np.ndarray, v: np.ndarray) -> np.ndarray:
    """v - 2 <grad, v> / |grad|^2 * grad."""
    grad = np.asarray(grad, dtype=float)
    v = np.asarray(v, dtype=float)
    if grad.shape != v.shape:
        raise DimensionMismatchError(v.size, grad.size, "gradient length")
    norm2 = float(np.dot(grad, grad))
    if norm2 == 0.0:
        raise DegenerateBounceError()
    return v - (2.0 * float(np.dot(grad, v)) / norm2) * grad


def bounce_rate(p: Potential, z: PhasePoint) -> float:
    """<grad U(x), v>_+."""
    if z.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z.dimension)
    return max(0.0, float(np.dot(p.gradient(z.x), z.v)))


def integrated_gaussian_rate(a: float, s: float, t: float) -> float:
    """Lambda(t) = [((a + s t)_+)^2 - (a_+)^2] / (2 s), the integrated rate of (a + s u)_+."""
    return (max(a + s * t, 0.0) ** 2 - max(a, 0.0) ** 2) / (2.0 * s)


def sample_bounce_time_gaussian(a: float, s: float, rng: Optional[RngStream] = None,
                                exponential: Optional[float] = None) -> float:
    """
    Draw tau with P(tau > t) = exp(-Lambda(t)) for the rate (a + s t)_+.

    a = <Hx, v>, s = <Hv, v>. `exponential` injects the Exp(1) variate.
    """
    if not s > 0:
        raise DomainError("s", s, "s > 0")
    e = exponential if exponential is not None else float(rng.exponential())
    if a > 0:
        # stable form of (sqrt(a^2 + 2 s E) - a) / s
        return 2.0 * e / (math.sqrt(a * a + 2.0 * s * e) + a)
    return (math.sqrt(2.0 * s * e) - a) / s


def sample_bounce_time_polynomial(coefficients: np.ndarray, rng: Optional[RngStream] = None,
                                  exponential: Optional[float] = None) -> float:
    """
    Exact draw for a polynomial rate t -> (sum_k c_k t^k)_+.

    The positive part is integrated piecewise between the positive real roots
    of the polynomial; the piece holding the Exp(1) level is inverted with brentq.
    Returns inf when the integrated rate stays below the level forever.
    """
    e = exponential if exponential is not None else float(rng.exponential())
    coefficients = np.asarray(coefficients, dtype=float)
    scale = float(np.max(np.abs(coefficients))) if coefficients.size else 0.0
    if scale == 0.0:
        return math.inf
    coefficients = np.trim_zeros(np.where(np.abs(coefficients) > 1e-300, coefficients, 0.0), "b")
    rate = Polynomial(coefficients)
    primitive = rate.integ()
    roots = rate.roots() if rate.degree() > 0 else np.array([])
    real = np.real(roots[np.abs(np.imag(roots)) <= 1e-10 * (1.0 + np.abs(roots))])
    breaks = np.unique(real[real > 0.0])
    edges = np.concatenate([[0.0], breaks, [math.inf]])

    remaining = e
    for start, end in zip(edges[:-1], edges[1:]):
        inside = 0.5 * (start + end) if math.isfinite(end) else start + 1.0
        if rate(inside) <= 0.0:
            continue
        base = primitive(start)
        if math.isfinite(end):
            mass = primitive(end) - base
            if mass < remaining:
                remaining -= mass
                continue
            upper = end
        else:
            upper = start + 1.0
            while primitive(upper) - base < remaining:
                upper = start + 2.0 * (upper - start)
                if not math.isfinite(upper):
                    raise NumericalFailureError("polynomial event-time bracket diverged")
        target = remaining
        return float(brentq(lambda t: primitive(t) - base - target, start, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return math.inf


def default_thinning_slice(speed: float, M: float) -> float:
    """1 / (|v| sqrt(M) + eps): keeps the linear envelope's overshoot bounded."""
    return 1.0 / (speed * math.sqrt(M) + settings.THINNING_EPS)


def sample_bounce_time_thinning(p: Potential, z: PhasePoint, slice: Optional[float], rng: RngStream,
                                horizon: float = math.inf, stats: Optional[Dict[str, int]] = None) -> float:
    """
    Exact draw from the rate t -> <grad U(x + t v), v>_+ by Poisson thinning.

    On each window of length `slice` the envelope is
    (<grad U(x0), v>)_+ + M |v|^2 t, valid because grad U is M-Lipschitz.
    Returns inf when no bounce occurs before `horizon`.
    """
    if p.hessian_bounds is None:
        raise UnsupportedPotentialError("sample_bounce_time_thinning", "hessian_bounds (m, M)")
    M = p.hessian_bounds[1]
    x, v = z.x, z.v
    speed2 = float(np.dot(v, v))
    if speed2 == 0.0:
        return math.inf
    window = slice if slice is not None else default_thinning_slice(math.sqrt(speed2), M)
    slope = M * speed2
    elapsed = 0.0
    while elapsed < horizon:
        rate0 = max(0.0, float(np.dot(p.gradient(x), v)))
        u = 0.0
        while True:
            level = rate0 + slope * u
            e = float(rng.exponential())
            u += 2.0 * e / (math.sqrt(level * level + 2.0 * slope * e) + level)
            if u > window or elapsed + u > horizon:
                break
            if stats is not None:
                stats["proposals"] = stats.get("proposals", 0) + 1
            true_rate = max(0.0, float(np.dot(p.gradient(x + u * v), v)))
            if rng.uniform() * (rate0 + slope * u) <= true_rate:
                if stats is not None:
                    stats["accepted"] = stats.get("accepted", 0) + 1
                return elapsed + u
        x = x + window * v
        elapsed += window
    return math.inf


def refresh_velocity(v: np.ndarray, alpha: float, rng: Optional[RngStream] = None,
                     xi: Optional[np.ndarray] = None) -> np.ndarray:
    """alpha v + sqrt(1 - alpha^2) xi with xi standard normal (injectable)."""
    if not 0.0 <= alpha < 1.0:
        raise DomainError("alpha", alpha, "0 <= alpha < 1")
    v = np.asarray(v, dtype=float)
    noise = xi if xi is not None else rng.standard_normal(v.shape)
    return alpha * v + math.sqrt(1.0 - alpha * alpha) * noise


def _bounce_time(p: Potential, x: np.ndarray, v: np.ndarray, cfg: BpsConfig, rng: RngStream,
                 cap: float, stats: Dict[str, int]) -> float:
    if p.gaussian is not None:
        hv = p.gaussian.apply(v)
        s = float(np.dot(hv, v))
        if s == 0.0:
            return math.inf
        a = float(np.dot(p.gaussian.apply(x), v))
        return sample_bounce_time_gaussian(a, s, rng)
    if p.exact_event_sampler:
        return sample_bounce_time_polynomial(p.rate_polynomial(x, v), rng)
    return sample_bounce_time_thinning(p, PhasePoint(x, v), cfg.thinning_slice, rng, horizon=cap, stats=stats)


def iter_bps_events(p: Potential, z0: PhasePoint, cfg: BpsConfig, rng: RngStream,
                    stats: Optional[Dict[str, int]] = None) -> Iterator[Tuple[float, EventKind, np.ndarray, np.ndarray]]:
    """
    Stream (time, kind, x_after, v_after) for every event of a BPS path.

    Refreshment and bounce clocks compete; equal times resolve to a refresh.
    Stops at cfg.horizon or after cfg.max_events events.
    """
    if z0.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z0.dimension)
    stats = stats if stats is not None else {}
    t = 0.0
    x, v = z0.x.copy(), z0.v.copy()
    n = 0
    while True:
        remaining = cfg.horizon - t
        tau_ref = float(rng.exponential()) / cfg.lambda_ref if cfg.lambda_ref > 0 else math.inf
        tau_bounce = _bounce_time(p, x, v, cfg, rng, min(remaining, tau_ref), stats)
        tau = min(tau_ref, tau_bounce)
        if not math.isfinite(tau) or tau > remaining:
            return
        x = x + tau * v
        t += tau
        if tau_ref <= tau_bounce:
            kind = EventKind.REFRESH
            v = refresh_velocity(v, cfg.alpha, rng)
        else:
            kind = EventKind.BOUNCE
            grad = p.gradient(x)
            if not np.any(grad):
                raise DegenerateBounceError(t)
            v = bounce_reflect(grad, v)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise NumericalFailureError(f"non-finite state after {kind.value} at t={t!r}")
        yield t, kind, x, v
        n += 1
        if cfg.max_events is not None and n >= cfg.max_events:
            return


def simulate_bps(p: Potential, z0: PhasePoint, cfg: BpsConfig, rng: RngStream) -> PathSkeleton:
    """Exact BPS skeleton over [0, horizon] (or up to cfg.max_events events)."""
    stats: Dict[str, int] = {}
    times: List[float] = []
    kinds: List[EventKind] = []
    xs: List[np.ndarray] = []
    vs: List[np.ndarray] = []
    for t, kind, x, v in iter_bps_events(p, z0, cfg, rng, stats):
        times.append(t)
        kinds.append(kind)
        xs.append(x)
        vs.append(v)
    budget_hit = cfg.max_events is not None and len(times) >= cfg.max_events
    horizon = times[-1] if budget_hit else cfg.horizon
    d = p.dimension
    path = PathSkeleton(
        t0=0.0,
        z0=z0,
        times=np.array(times, dtype=float),
        kinds=tuple(kinds),
        xs=np.array(xs, dtype=float).reshape(-1, d),
        vs=np.array(vs, dtype=float).reshape(-1, d),
        dynamics=Dynamics.LINEAR,
        horizon=float(horizon),
        meta={"process": "bps", "lambda_ref": cfg.lambda_ref, "alpha": cfg.alpha},
    )
    logger.info(
        f"BPS on {p.name} (d={d}): {path.n_events} events "
        f"({path.count(EventKind.BOUNCE)} bounces) over horizon {path.horizon:.6g}"
    )
    if stats.get("proposals"):
        logger.debug(f"Thinning acceptance {stats.get('accepted', 0)}/{stats['proposals']}")
    return path


def eval_path(path: PathSkeleton, t: float) -> PhasePoint:
    """Exact state at time t; at an event time the post-event state is returned."""
    if not (path.t0 <= t <= path.t0 + path.horizon):
        raise DomainError("t", t, f"t in [{path.t0}, {path.t0 + path.horizon}]")
    idx = int(np.searchsorted(path.times, t, side="right")) - 1
    if idx < 0:
        start, x, v = path.t0, path.z0.x, path.z0.v
    else:
        start, x, v = float(path.times[idx]), path.xs[idx], path.vs[idx]
    s = t - start
    if s == 0.0:
        return PhasePoint(x, v)
    if path.dynamics is Dynamics.LINEAR:
        return PhasePoint(x + s * v, v)
    return path.propagator(PhasePoint(x, v), s)
