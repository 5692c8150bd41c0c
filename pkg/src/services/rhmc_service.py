"""
Randomized Hamiltonian Monte Carlo.

Hamiltonian dynamics for H(x, v) = U(x) + |v|^2 / 2 between the arrival
times of a homogeneous Poisson(lambda_ref) clock; at each arrival the velocity
is refreshed with the autoregressive kernel shared with the BPS.

Flows:
- exact_isotropic: closed-form rotation for U = s |x|^2 / 2
- exact_gaussian: mode-wise rotation through the cached eigendecomposition of H
- leapfrog: velocity Verlet with step h, the last step shortened to land on t
- frozen: no motion, leaving a pure-jump chain on the velocity
"""

import math
from typing import List

import numpy as np

from src.core.errors import DomainError, DimensionMismatchError, NumericalFailureError, UnsupportedPotentialError
from src.core.logging import logger
from src.core.phase_space import PhasePoint
from src.core.potentials import Potential
from src.core.rng import RngStream
from src.db.models import FlowSpec, RhmcConfig
from src.services.bps_service import Dynamics, EventKind, PathSkeleton, refresh_velocity


def default_flow(p: Potential, step: float = 1e-3) -> FlowSpec:
    """Exact flow when the potential is Gaussian, leapfrog with `step` otherwise."""
    if p.gaussian is not None:
        return FlowSpec(kind="exact_isotropic" if p.gaussian.isotropic else "exact_gaussian")
    return FlowSpec(kind="leapfrog", step=step)


def _rotate(x: np.ndarray, v: np.ndarray, omega: np.ndarray, t: float):
    cos, sin = np.cos(omega * t), np.sin(omega * t)
    return x * cos + v * (sin / omega), -x * omega * sin + v * cos


def _leapfrog(p: Potential, x: np.ndarray, v: np.ndarray, t: float, h: float):
    n = max(1, math.ceil(abs(t) / h - 1e-9))
    sign = 1.0 if t > 0 else -1.0
    last = t - sign * (n - 1) * h
    steps = [sign * h] * (n - 1)
    # backward integration mirrors the forward schedule so that it inverts it step by step
    steps = steps + [last] if t > 0 else [last] + steps
    grad = p.gradient(x)
    for step in steps:
        v = v - 0.5 * step * grad
        x = x + step * v
        grad = p.gradient(x)
        v = v - 0.5 * step * grad
    return x, v


def hamiltonian_flow(p: Potential, z: PhasePoint, t: float, flow: FlowSpec) -> PhasePoint:
    """
    Advance z by t time units under the Hamiltonian dynamics of p.

    Negative t integrates backwards.
    """
    if z.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z.dimension)
    if t == 0 or flow.kind == "frozen":
        return z
    if flow.kind == "exact_isotropic":
        if p.gaussian is None or not p.gaussian.isotropic:
            raise UnsupportedPotentialError("exact_isotropic flow", "an isotropic Gaussian form")
        x, v = _rotate(z.x, z.v, math.sqrt(p.gaussian.scale), t)
    elif flow.kind == "exact_gaussian":
        if p.gaussian is None:
            raise UnsupportedPotentialError("exact_gaussian flow", "a Gaussian form")
        eigvals, eigvecs = p.gaussian.eigen
        y, w = _rotate(eigvecs.T @ z.x, eigvecs.T @ z.v, np.sqrt(eigvals), t)
        x, v = eigvecs @ y, eigvecs @ w
    else:
        h = flow.step
        if p.hessian_bounds is not None and h * math.sqrt(p.hessian_bounds[1]) >= 2.0:
            raise DomainError("step", h, f"h * sqrt(M) < 2 with M={p.hessian_bounds[1]}")
        x, v = _leapfrog(p, z.x, z.v, t, h)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NumericalFailureError(f"non-finite state after {flow.kind} flow over t={t!r}")
    return PhasePoint(x, v)


def simulate_rhmc(p: Potential, z0: PhasePoint, cfg: RhmcConfig, rng: RngStream) -> PathSkeleton:
    """RHMC skeleton: refresh events at Poisson(lambda_ref) times, Hamiltonian flow in between."""
    if z0.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z0.dimension)
    if cfg.lambda_ref == 0 and math.isinf(cfg.horizon):
        raise DomainError("horizon", cfg.horizon, "finite horizon when lambda_ref = 0")
    flow = cfg.flow
    times: List[float] = []
    xs: List[np.ndarray] = []
    vs: List[np.ndarray] = []
    t = 0.0
    z = z0
    while cfg.max_events is None or len(times) < cfg.max_events:
        tau = float(rng.exponential()) / cfg.lambda_ref if cfg.lambda_ref > 0 else math.inf
        if t + tau > cfg.horizon:
            break
        t += tau
        z = hamiltonian_flow(p, z, tau, flow)
        z = PhasePoint(z.x, refresh_velocity(z.v, cfg.alpha, rng))
        times.append(t)
        xs.append(z.x)
        vs.append(z.v)
    budget_hit = cfg.max_events is not None and len(times) >= cfg.max_events
    d = p.dimension
    path = PathSkeleton(
        t0=0.0,
        z0=z0,
        times=np.array(times, dtype=float),
        kinds=(EventKind.REFRESH,) * len(times),
        xs=np.array(xs, dtype=float).reshape(-1, d),
        vs=np.array(vs, dtype=float).reshape(-1, d),
        dynamics=Dynamics.HAMILTONIAN_FLOW,
        horizon=float(times[-1] if budget_hit else cfg.horizon),
        propagator=lambda state, s: hamiltonian_flow(p, state, s, flow),
        meta={"process": "rhmc", "lambda_ref": cfg.lambda_ref, "alpha": cfg.alpha, "flow": flow.kind},
    )
    logger.info(f"RHMC on {p.name} (d={d}, flow={flow.kind}): {path.n_events} refreshes over horizon {path.horizon:.6g}")
    return path
