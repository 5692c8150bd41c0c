"""
Synchronous coupling of two RHMC paths.

Both paths share one Poisson refreshment clock and one Gaussian innovation per
refreshment, so at a refreshment the velocity difference is multiplied by
alpha. Between refreshments both follow the same Hamiltonian flow. For
Gaussian targets the difference process is itself a Hamiltonian flow of the
same potential and is evolved directly.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.config import settings
from src.core.errors import DegenerateEnsembleError, DimensionMismatchError, DomainError
from src.core.logging import logger
from src.core.phase_space import PhasePoint
from src.core.potentials import Potential, sample_stationary
from src.core.rng import RngStream
from src.db.models import RhmcConfig
from src.services.ensemble import run_replicates
from src.services.rhmc_service import hamiltonian_flow
from src.services.tuning_service import min_eigenvalue_2x2


@dataclass(frozen=True)
class Metric:
    """
    Weighted phase-space metric.

    WeightedABC: a|dx|^2 + 2b<dx, dv> + c|dv|^2.
    BlockGaussian (precision given): <dx, H dx> a + 2b<dx, dv> + c|dv|^2.
    """
    a: float
    b: float
    c: float
    precision: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.b * self.b < self.a * self.c):
            raise DomainError("metric", (self.a, self.b, self.c), "a > 0, c > 0, b^2 < ac")
        if self.precision is not None:
            H = np.asarray(self.precision, dtype=float)
            lam_min = float(np.linalg.eigvalsh(H)[0])
            if not self.a * lam_min > self.b * self.b / self.c:
                raise DomainError("metric", (self.a, self.b, self.c), "block matrix [[aH, bI], [bI, cI]] positive definite")
            object.__setattr__(self, "precision", H)

    @property
    def kind(self) -> str:
        return "WeightedABC" if self.precision is None else "BlockGaussian"

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])

    def adjoint(self) -> "Metric":
        return Metric(self.a, -self.b, self.c, self.precision)

    def quadratic(self, dx: np.ndarray, dv: np.ndarray) -> np.ndarray:
        dx = np.asarray(dx, dtype=float)
        dv = np.asarray(dv, dtype=float)
        hx = dx if self.precision is None else dx @ self.precision.T
        return (
            self.a * np.einsum("...i,...i->...", dx, hx)
            + 2.0 * self.b * np.einsum("...i,...i->...", dx, dv)
            + self.c * np.einsum("...i,...i->...", dv, dv)
        )


@dataclass(frozen=True)
class CouplingTrace:
    times: np.ndarray
    d2: np.ndarray
    on_grid: np.ndarray         # True at uniform sub-grid times, False at refreshment times
    metric: Metric
    n_refreshes: int
    final: Tuple[PhasePoint, PhasePoint]
    distance_floor: float = 0.0


@dataclass(frozen=True)
class EnsembleSummary:
    times: np.ndarray
    mean_d2: np.ndarray
    se: np.ndarray
    n_traces: int


def weighted_distance_sq(z1: PhasePoint, z2: PhasePoint, metric: Metric) -> float:
    """d^2 between two phase points under `metric`."""
    if z1.dimension != z2.dimension:
        raise DimensionMismatchError(z1.dimension, z2.dimension)
    if metric.precision is not None and metric.precision.shape[0] != z1.dimension:
        raise DimensionMismatchError(metric.precision.shape[0], z1.dimension, "precision size")
    return float(metric.quadratic(z2.x - z1.x, z2.v - z1.v))


def metric_min_eigenvalue(metric: Metric) -> float:
    """Smallest eigenvalue of [[a, b], [b, c]]; 0 on the boundary b^2 = ac."""
    return float(min_eigenvalue_2x2(metric.matrix))


def couple_rhmc(p: Potential, z1: PhasePoint, z2: PhasePoint, cfg: RhmcConfig, metric: Metric,
                rng: RngStream, grid_dt: float = 0.1) -> CouplingTrace:
    """
    Synchronously coupled RHMC pair over [0, cfg.horizon].

    Path 1 consumes the random stream exactly like `simulate_rhmc`, so it is a
    draw of the uncoupled process. d^2 is recorded at t = 0, at every
    refreshment (after the update) and at multiples of grid_dt.
    """
    if z1.dimension != p.dimension or z2.dimension != p.dimension:
        raise DimensionMismatchError(p.dimension, z2.dimension if z1.dimension == p.dimension else z1.dimension)
    if not math.isfinite(cfg.horizon):
        raise DomainError("horizon", cfg.horizon, "finite horizon")
    if not grid_dt > 0:
        raise DomainError("grid_dt", grid_dt, "grid_dt > 0")
    flow = cfg.flow
    linear = p.gaussian is not None and flow.kind != "leapfrog"
    # segment start states; for linear flows the second one is the difference z2 - z1
    start1 = z1
    start2 = PhasePoint(z2.x - z1.x, z2.v - z1.v) if linear else z2
    seg_t = 0.0

    def states_at(s: float) -> Tuple[PhasePoint, np.ndarray, np.ndarray]:
        w1 = hamiltonian_flow(p, start1, s, flow)
        w2 = hamiltonian_flow(p, start2, s, flow)
        if linear:
            return w1, w2.x, w2.v
        return w1, w2.x - w1.x, w2.v - w1.v

    times: List[float] = [0.0]
    d2: List[float] = [float(metric.quadratic(z2.x - z1.x, z2.v - z1.v))]
    on_grid: List[bool] = [True]
    n_grid = int(math.floor(cfg.horizon / grid_dt + 1e-9))
    k = 1
    n_ref = 0
    while True:
        tau = float(rng.exponential()) / cfg.lambda_ref if cfg.lambda_ref > 0 else math.inf
        t_ref = seg_t + tau
        while k <= n_grid and k * grid_dt <= min(t_ref, cfg.horizon):
            _, dx, dv = states_at(k * grid_dt - seg_t)
            times.append(k * grid_dt)
            d2.append(float(metric.quadratic(dx, dv)))
            on_grid.append(True)
            k += 1
        if t_ref > cfg.horizon:
            break
        w1, dx, dv = states_at(tau)
        xi = rng.standard_normal(p.dimension)
        root = math.sqrt(1.0 - cfg.alpha * cfg.alpha)
        v1 = cfg.alpha * w1.v + root * xi
        start1 = PhasePoint(w1.x, v1)
        if linear:
            start2 = PhasePoint(dx, cfg.alpha * dv)
        else:
            w2v = w1.v + dv
            start2 = PhasePoint(w1.x + dx, cfg.alpha * w2v + root * xi)
        seg_t = t_ref
        n_ref += 1
        times.append(t_ref)
        d2.append(float(metric.quadratic(dx, cfg.alpha * dv)))
        on_grid.append(False)
    w1, dx, dv = states_at(cfg.horizon - seg_t)
    final2 = PhasePoint(w1.x + dx, w1.v + dv)
    floor = 0.0
    if not linear:
        scale = max(float(np.max(np.abs(w1.x))), float(np.max(np.abs(w1.v))), 1.0)
        floor = float(max(metric.a, metric.c) * (np.finfo(float).eps * scale) ** 2 * p.dimension)
    return CouplingTrace(
        times=np.array(times),
        d2=np.array(d2),
        on_grid=np.array(on_grid, dtype=bool),
        metric=metric,
        n_refreshes=n_ref,
        final=(w1, final2),
        distance_floor=floor,
    )


def couple_ensemble(p: Potential, cfg: RhmcConfig, metric: Metric, n_pairs: int, seed: int, stream: int = 0,
                    grid_dt: float = 0.1, identical: bool = False, threads: Optional[int] = None) -> List[CouplingTrace]:
    """n_pairs coupled pairs started from independent stationary draws (or identical points)."""

    def job(i: int, rng: RngStream) -> CouplingTrace:
        z1 = sample_stationary(p, rng)
        z2 = z1 if identical else sample_stationary(p, rng)
        return couple_rhmc(p, z1, z2, cfg, metric, rng, grid_dt)

    traces = run_replicates(job, n_pairs, seed, stream, threads)
    logger.info(f"Coupled {n_pairs} RHMC pairs on {p.name} (d={p.dimension}) over horizon {cfg.horizon:g}")
    return traces


def ensemble_summary(traces: Sequence[CouplingTrace]) -> EnsembleSummary:
    """Mean d^2 and its standard error on the common sub-grid."""
    if not traces:
        raise DegenerateEnsembleError(0)
    grid = [tr.d2[tr.on_grid] for tr in traces]
    length = min(len(g) for g in grid)
    values = np.stack([g[:length] for g in grid])
    n = len(traces)
    se = values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(length)
    return EnsembleSummary(times=traces[0].times[traces[0].on_grid][:length], mean_d2=values.mean(axis=0), se=se, n_traces=n)


def _fit_log_slope(times: np.ndarray, mean: np.ndarray, t_start: float) -> Optional[float]:
    floor = 1e3 * np.finfo(float).eps * mean[0]
    mask = (times >= t_start) & (mean > floor) & (mean > 0)
    if mask.sum() < 2:
        return None
    slope, _ = np.polyfit(times[mask], np.log(mean[mask]), 1)
    return float(-slope)


def fit_contraction_rate(traces: Sequence[CouplingTrace], lambda_ref: Optional[float] = None,
                         t_start: Optional[float] = None, resamples: Optional[int] = None,
                         rng: Optional[RngStream] = None, min_traces: int = 100) -> Tuple[float, Tuple[float, float]]:
    """
    Exponential decay rate of the ensemble mean of d^2 with a bootstrap CI.

    The least-squares slope of log mean-d^2 against t is fitted over t >= t_start
    (default 1 / lambda_ref) where the mean exceeds 10^3 machine epsilon relative
    to its initial value. The CI takes the 2.5% and 97.5% bootstrap quantiles
    over resampled traces.
    """
    values = np.stack([tr.d2[tr.on_grid] for tr in traces]) if traces else np.zeros((0, 0))
    if not np.any(values):
        raise DegenerateEnsembleError(len(traces))
    if len(traces) < min_traces:
        raise DomainError("traces", len(traces), f"at least {min_traces} replicate traces")
    times = traces[0].times[traces[0].on_grid]
    if t_start is None:
        t_start = 1.0 / lambda_ref if lambda_ref else 0.0
    mu_hat = _fit_log_slope(times, values.mean(axis=0), t_start)
    if mu_hat is None:
        raise DegenerateEnsembleError(len(traces))
    rng = rng if rng is not None else RngStream(settings.DEFAULT_SEED, 1 << 32)
    resamples = resamples if resamples is not None else settings.BOOTSTRAP_RESAMPLES
    boot = []
    for _ in range(resamples):
        idx = rng.integers(0, len(traces), len(traces))
        fitted = _fit_log_slope(times, values[idx].mean(axis=0), t_start)
        if fitted is not None:
            boot.append(fitted)
    lo, hi = np.percentile(boot, [2.5, 97.5]) if boot else (mu_hat, mu_hat)
    logger.info(f"Fitted contraction rate {mu_hat:.6g} (95% CI [{lo:.6g}, {hi:.6g}]) from {len(traces)} traces")
    return mu_hat, (float(lo), float(hi))


def envelope_check(summary: EnsembleSummary, mu: float, n_se: float = 3.0) -> bool:
    """mean d^2(t) e^{mu t} is non-increasing up to n_se standard errors."""
    weight = np.exp(mu * summary.times)
    g = summary.mean_d2 * weight
    g_se = summary.se * weight
    best, best_se = g[0], g_se[0]
    for value, se in zip(g[1:], g_se[1:]):
        if value > best + n_se * math.hypot(se, best_se):
            return False
        if value < best:
            best, best_se = value, se
    return True


def equivalence_check(metric: Metric, C: float, n_pairs: int, rng: RngStream, d: int = 2) -> Dict[str, float]:
    """
    Worst ratios d_A'^2 / d_A^2 and d_A^2 / d_A'^2 over random phase pairs, to compare against C.
    """
    dx = rng.standard_normal((n_pairs, d)) * np.exp(rng.standard_normal((n_pairs, 1)))
    dv = rng.standard_normal((n_pairs, d)) * np.exp(rng.standard_normal((n_pairs, 1)))
    forward = metric.quadratic(dx, dv)
    adjoint = metric.adjoint().quadratic(dx, dv)
    return {
        "max_adjoint_over_forward": float(np.max(adjoint / forward)),
        "max_forward_over_adjoint": float(np.max(forward / adjoint)),
        "C": C,
    }
