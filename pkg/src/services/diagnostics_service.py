"""
Diagnostics for continuous-time sampler output.

Requirements:
1. Exact time averages of test functions along path skeletons.
2. Effective sample size by batch means on a uniform discretisation (dt default 0.25),
   pooled across replicate chains with Geyer's initial monotone sequence.
3. Events-per-ESS scaling studies over dimension, streamed so that d = 10^3
   chains with 10^5 events never hold a full skeleton in memory.
4. Weak-convergence distances between first-coordinate BPS and one-dimensional
   RHMC, measured with the energy distance on a path functional.
5. The self-normalised CLT for <grad U(X), V> / |grad U(X)|.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist
from scipy.special import roots_legendre

from src.core.config import settings
from src.core.errors import DomainError, UnsupportedPotentialError
from src.core.logging import logger
from src.core.phase_space import PhasePoint
from src.core.potentials import (
    Potential,
    ScalarPotential,
    get_inverse_cdf_sampler,
    make_isotropic_gaussian,
    make_product_potential,
    power_scalar,
    sample_stationary,
)
from src.core.rng import RngStream, batch_sizes
from src.core.test_functions import TEST_FUNCTIONS, TestFunction
from src.db.models import BpsConfig, EssReport, FlowSpec, RhmcConfig, ScalingFit
from src.services.bps_service import Dynamics, EventKind, PathSkeleton, eval_path, iter_bps_events
from src.services.ensemble import run_replicates
from src.services.rhmc_service import default_flow, hamiltonian_flow, simulate_rhmc

MIN_ESS_SAMPLES = 1000


# ---------------------------------------------------------------------------
# Path averages and ESS
# ---------------------------------------------------------------------------

def path_time_average(path: PathSkeleton, f: TestFunction, nodes: int = 16) -> float:
    """
    (1 / horizon) * integral of f(x(t)) along the skeleton.

    For linear motion the polynomial test functions are at most quadratic along
    a segment, so Simpson's rule is exact; other functions use Gauss-Legendre.
    """
    if path.horizon <= 0:
        raise DomainError("horizon", path.horizon, "horizon > 0")
    starts, xs, vs = path.segment_starts()
    ends = np.concatenate([starts[1:], [path.t0 + path.horizon]])
    lengths = ends - starts
    if path.dynamics is Dynamics.LINEAR and f.polynomial:
        mid = f(xs + 0.5 * lengths[:, None] * vs)
        total = np.sum(lengths / 6.0 * (f(xs) + 4.0 * mid + f(xs + lengths[:, None] * vs)))
        return float(total) / path.horizon
    gl_nodes, gl_weights = roots_legendre(nodes)
    offsets = 0.5 * (gl_nodes + 1.0)
    if path.dynamics is Dynamics.LINEAR:
        s = lengths[:, None] * offsets[None, :]
        points = xs[:, None, :] + s[..., None] * vs[:, None, :]
        values = f(points)
    else:
        values = np.array([
            [f(path.propagator(PhasePoint(x, v), float(length * o)).x) for o in offsets]
            for x, v, length in zip(xs, vs, lengths)
        ])
    total = np.sum(0.5 * lengths * (values @ gl_weights))
    return float(total) / path.horizon


def discretize_path(path: PathSkeleton, dt: float) -> np.ndarray:
    """Positions at t0, t0 + dt, ... up to the horizon, shape (n, d)."""
    n = int(math.floor(path.horizon / dt + 1e-9)) + 1
    grid = path.t0 + dt * np.arange(n)
    starts, xs, vs = path.segment_starts()
    idx = np.searchsorted(starts, grid, side="right") - 1
    if path.dynamics is Dynamics.LINEAR:
        return xs[idx] + (grid - starts[idx])[:, None] * vs[idx]
    return np.array([
        path.propagator(PhasePoint(xs[i], vs[i]), float(t - starts[i])).x for i, t in zip(idx, grid)
    ])


def batch_means_ess(values: np.ndarray) -> Tuple[float, float]:
    """
    ESS = n * sample variance / long-run variance, the latter from floor(sqrt(n)) batch means.

    Returns (ess, Monte Carlo standard error of the mean). ESS is capped at n.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 4:
        raise DomainError("samples", n, "at least 4 samples")
    n_batches = int(math.isqrt(n))
    size = n // n_batches
    trimmed = values[: n_batches * size]
    variance = float(np.var(values, ddof=1))
    if variance == 0.0:
        return float(n), 0.0
    batch_var = float(np.var(trimmed.reshape(n_batches, size).mean(axis=1), ddof=1))
    long_run = size * batch_var
    if long_run <= 0.0:
        return float(n), 0.0
    ess = min(float(n), n * variance / long_run)
    return ess, math.sqrt(long_run / n)


def estimate_ess(path: PathSkeleton, f: TestFunction, dt: Optional[float] = None) -> Tuple[float, float]:
    """Batch-means ESS of f along the path discretised at step dt."""
    dt = settings.ESS_DT if dt is None else dt
    if path.horizon / dt < MIN_ESS_SAMPLES:
        raise DomainError("dt", dt, f"horizon / dt >= {MIN_ESS_SAMPLES} samples")
    return batch_means_ess(f(discretize_path(path, dt)))


@dataclass
class StreamedChain:
    values: Dict[str, np.ndarray]     # f values on the dt grid, per function id
    n_events: int
    n_bounces: int
    horizon: float


def stream_bps_grid_values(p, z0: PhasePoint, cfg: BpsConfig, rng: RngStream,
                           functions: Sequence[TestFunction], dt: float) -> StreamedChain:
    """Run a BPS chain and evaluate the test functions on the dt grid without storing the skeleton."""
    chunks: Dict[str, List[np.ndarray]] = {f.id: [] for f in functions}
    t_seg, x, v = 0.0, z0.x, z0.v
    k = 0
    n_events = n_bounces = 0

    def flush(until: float, inclusive: bool):
        nonlocal k
        stop = int(math.floor(until / dt + 1e-9)) if inclusive else int(math.ceil(until / dt - 1e-9)) - 1
        if stop < k:
            return
        grid = dt * np.arange(k, stop + 1)
        points = x[None, :] + (grid - t_seg)[:, None] * v[None, :]
        for f in functions:
            chunks[f.id].append(np.asarray(f(points), dtype=float))
        k = stop + 1

    for t, kind, x_new, v_new in iter_bps_events(p, z0, cfg, rng):
        flush(t, inclusive=False)
        t_seg, x, v = t, x_new, v_new
        n_events += 1
        n_bounces += kind is EventKind.BOUNCE
    budget_hit = cfg.max_events is not None and n_events >= cfg.max_events
    horizon = t_seg if budget_hit else cfg.horizon
    flush(horizon, inclusive=True)
    values = {fid: np.concatenate(parts) if parts else np.empty(0) for fid, parts in chunks.items()}
    return StreamedChain(values=values, n_events=n_events, n_bounces=n_bounces, horizon=horizon)


def _policy_rate(policy: str, d: int) -> float:
    if policy == "const1":
        return 1.0
    if policy == "sqrtd":
        return math.sqrt(d)
    raise DomainError("policy", policy, "one of const1, sqrtd")


def autocovariance(chains: np.ndarray) -> np.ndarray:
    """Biased autocovariance of every row at lags 0..n-1, by FFT."""
    n = chains.shape[1]
    centered = chains - chains.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    power = np.abs(np.fft.rfft(centered, n=size, axis=1)) ** 2
    return np.fft.irfft(power, n=size, axis=1)[:, :n] / n


def pooled_ess(means: np.ndarray, acov: np.ndarray, counts: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Multi-chain ESS with Geyer's initial monotone sequence.

    `means` and `acov` are per-chain means and autocovariances over a common
    length n; `counts` reweights chains (bootstrap resamples). The
    between-chain variance enters every autocorrelation.
    Returns (ess over all chains, capped at m * n; pooled variance).
    """
    m, n = acov.shape
    if counts is None:
        counts = np.ones(m)
        chain_means = means
    else:
        chain_means = np.repeat(means, counts.astype(int))
    mean_acov = counts @ acov / counts.sum()
    mean_var = float(mean_acov[0]) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if chain_means.size > 1:
        var_plus += float(np.var(chain_means, ddof=1))
    if var_plus <= 0.0:
        return float(m * n), 0.0
    rho = 1.0 - (mean_var - mean_acov) / var_plus
    rho[0] = 1.0
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    negative = np.flatnonzero(pairs < 0.0)
    if negative.size:
        pairs = pairs[: negative[0]]
    tau = -1.0 + 2.0 * float(np.sum(np.minimum.accumulate(pairs)))
    if tau <= 0.0:
        return float(m * n), var_plus
    return min(float(m * n), m * n / tau), var_plus


def _chain_moments(chains: Sequence[StreamedChain], f: TestFunction) -> Tuple[np.ndarray, np.ndarray]:
    """Per-chain means and autocovariances of f, with chains cut to their common length."""
    n = min(chain.values[f.id].size for chain in chains)
    matrix = np.stack([chain.values[f.id][:n] for chain in chains])
    return matrix.mean(axis=1), autocovariance(matrix)


def _function_reports(chains: Sequence[StreamedChain], f: TestFunction, d: int, policy: str,
                      moments: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> List[EssReport]:
    """
    One report per replicate. A single chain uses batch means; several chains
    share the pooled estimate, so each replicate carries ess / m.
    """
    shortest = min(chain.values[f.id].size for chain in chains)
    if shortest < MIN_ESS_SAMPLES:
        raise DomainError("events", min(c.n_events for c in chains),
                          f"a horizon with at least {MIN_ESS_SAMPLES} samples")
    if len(chains) == 1:
        ess, se = batch_means_ess(chains[0].values[f.id])
        n_samples = shortest
    else:
        means, acov = moments if moments is not None else _chain_moments(chains, f)
        total, var_plus = pooled_ess(means, acov)
        ess = total / len(chains)
        se = math.sqrt(var_plus / ess)
        n_samples = acov.shape[1]
    return [
        EssReport(function_id=f.id, d=d, lambda_ref_policy=policy, replicate=i, n_events=chain.n_events,
                  n_samples=n_samples, ess=ess, events_per_ess=chain.n_events / ess, stderr=se)
        for i, chain in enumerate(chains)
    ]


def _ess_reports(chains: Sequence[StreamedChain], functions: Sequence[TestFunction], d: int,
                 policy: str) -> List[EssReport]:
    per_function = [_function_reports(chains, f, d, policy) for f in functions]
    return [rows[i] for i in range(len(chains)) for rows in per_function]


def _gaussian_chains(d: int, policy: str, functions: Sequence[TestFunction], budget_events: int,
                     replicates: int, seed: int, stream: int, dt: float,
                     threads: Optional[int]) -> List[StreamedChain]:
    p = make_isotropic_gaussian(d)
    cfg = BpsConfig(lambda_ref=_policy_rate(policy, d), alpha=0.0, max_events=budget_events)

    def job(i: int, rng: RngStream) -> StreamedChain:
        return stream_bps_grid_values(p, sample_stationary(p, rng), cfg, rng, functions, dt)

    return run_replicates(job, replicates, seed, stream, threads)


def fit_log_log_slope(dims: Sequence[int], values: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(dims, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)
    return float(slope)


def run_scaling_study(dims: Sequence[int], policy: str, f: TestFunction, budget_events: int, replicates: int,
                      seed: Optional[int] = None, stream: int = 0, dt: Optional[float] = None,
                      threads: Optional[int] = None, resamples: Optional[int] = None
                      ) -> Tuple[ScalingFit, List[EssReport]]:
    """
    Events per ESS of f against d for BPS on the standard Gaussian, alpha = 0.

    Chains start at stationarity, so with two or more replicates the ESS at
    each d is pooled across replicates; the slope CI bootstraps replicates
    within each d.
    """
    seed = settings.DEFAULT_SEED if seed is None else seed
    dt = settings.ESS_DT if dt is None else dt
    dims = sorted(int(d) for d in dims)
    reports: List[EssReport] = []
    values: List[float] = []
    per_dim = []
    for j, d in enumerate(dims):
        chains = _gaussian_chains(d, policy, [f], budget_events, replicates, seed,
                                  stream + j * replicates, dt, threads)
        moments = _chain_moments(chains, f) if len(chains) > 1 else None
        rows = _function_reports(chains, f, d, policy, moments)
        reports.extend(rows)
        values.append(float(np.mean([r.events_per_ess for r in rows])))
        if moments is not None:
            per_dim.append((*moments, np.array([c.n_events for c in chains], dtype=float)))
        logger.info(f"{f.id} d={d} policy={policy}: events/ESS {values[-1]:.6g}")
    slope = fit_log_log_slope(dims, values)
    rng = RngStream(seed, stream + len(dims) * replicates)
    boot = []
    if len(dims) > 1 and per_dim:
        for _ in range(resamples if resamples is not None else settings.BOOTSTRAP_RESAMPLES):
            sample = []
            for means, acov, events in per_dim:
                idx = rng.integers(0, len(means), len(means))
                counts = np.bincount(idx, minlength=len(means))
                total, _ = pooled_ess(means, acov, counts)
                sample.append(float(events[idx].mean()) * len(means) / total)
            boot.append(fit_log_log_slope(dims, sample))
    lo, hi = np.percentile(boot, [2.5, 97.5]) if boot else (slope, slope)
    fit = ScalingFit(function_id=f.id, policy=policy, dims=dims, values=values, slope=slope,
                     slope_ci=(float(lo), float(hi)))
    return fit, reports


def ess_bench(d: int, policy: str, budget_events: int, replicates: int = 1, seed: Optional[int] = None,
              stream: int = 0, dt: Optional[float] = None, threads: Optional[int] = None) -> List[EssReport]:
    """Events per ESS for all seven test functions at one (d, policy)."""
    seed = settings.DEFAULT_SEED if seed is None else seed
    dt = settings.ESS_DT if dt is None else dt
    functions = [f for f in TEST_FUNCTIONS.values() if f.min_dimension <= d]
    chains = _gaussian_chains(d, policy, functions, budget_events, replicates, seed, stream, dt, threads)
    return _ess_reports(chains, functions, d, policy)


# ---------------------------------------------------------------------------
# Distributional distances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyDistance:
    distance: float
    se: float
    p_value: Optional[float] = None


def _energy_from_matrices(dxy: np.ndarray, dxx: np.ndarray, dyy: np.ndarray) -> float:
    n, m = dxx.shape[0], dyy.shape[0]
    within_x = dxx.sum() / (n * (n - 1))
    within_y = dyy.sum() / (m * (m - 1))
    return float(2.0 * dxy.mean() - within_x - within_y)


def energy_distance(sample_a: np.ndarray, sample_b: np.ndarray, resamples: Optional[int] = None,
                    permutations: int = 0, rng: Optional[RngStream] = None) -> EnergyDistance:
    """
    2 E|X - Y| - E|X - X'| - E|Y - Y'| with unbiased within-sample terms.

    The standard error bootstraps both samples; a permutation p-value is
    computed when permutations > 0.
    """
    a = np.asarray(sample_a, dtype=float).reshape(len(sample_a), -1)
    b = np.asarray(sample_b, dtype=float).reshape(len(sample_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise DomainError("sample size", min(len(a), len(b)), "at least 2 points per sample")
    rng = rng if rng is not None else RngStream(settings.DEFAULT_SEED, 1 << 33)
    dxy, dxx, dyy = cdist(a, b), cdist(a, a), cdist(b, b)
    distance = _energy_from_matrices(dxy, dxx, dyy)
    boot = []
    for _ in range(resamples if resamples is not None else settings.BOOTSTRAP_RESAMPLES):
        ia = rng.integers(0, len(a), len(a))
        ib = rng.integers(0, len(b), len(b))
        boot.append(_energy_from_matrices(dxy[np.ix_(ia, ib)], dxx[np.ix_(ia, ia)], dyy[np.ix_(ib, ib)]))
    se = float(np.std(boot, ddof=1)) if len(boot) > 1 else 0.0
    p_value = None
    if permutations > 0:
        pooled = np.vstack([a, b])
        dpp = cdist(pooled, pooled)
        n = len(a)
        exceed = 0
        for _ in range(permutations):
            perm = rng.generator.permutation(len(pooled))
            ia, ib = perm[:n], perm[n:]
            stat = _energy_from_matrices(dpp[np.ix_(ia, ib)], dpp[np.ix_(ia, ia)], dpp[np.ix_(ib, ib)])
            exceed += stat >= distance
        p_value = (exceed + 1) / (permutations + 1)
    return EnergyDistance(distance=distance, se=se, p_value=p_value)


@dataclass(frozen=True)
class WeakLimitPoint:
    d: int
    distance: float
    se: float
    p_value: Optional[float]
    hamiltonian_rms: float


def _flow_residual(p1: Potential, flow: FlowSpec, lag: float, before: Tuple[float, float],
                   after: Tuple[float, float]) -> Tuple[float, float]:
    """(x1, v1) at the end of a window minus the 1-D Hamiltonian flow of its start."""
    z = hamiltonian_flow(p1, PhasePoint([before[0]], [before[1]]), lag, flow)
    return after[0] - float(z.x[0]), after[1] - float(z.v[0])


def bps_lag_residual(u1: ScalarPotential, d: int, T: float, lag: float, cfg: BpsConfig, flow: FlowSpec,
                     rng: RngStream) -> Tuple[float, float, float, int]:
    """
    First-coordinate residual of a stationary BPS chain on the d-fold product of
    u1 over [T - lag, T], plus the summed squared 1-D Hamiltonian deviations
    between refreshments and their count.
    """
    p = make_product_potential(u1, d)
    p1 = make_product_potential(u1, 1)
    z0 = sample_stationary(p, rng)
    h = lambda x1, v1: float(u1.value(np.array(x1))) + 0.5 * v1 * v1
    mark = T - lag
    t_last, x, v = 0.0, z0.x, z0.v
    h_ref = h(x[0], v[0])
    sq_dev, count = 0.0, 0
    before = None
    for t, kind, x_new, v_new in iter_bps_events(p, z0, cfg, rng):
        if before is None and t > mark:
            before = (float(x[0] + (mark - t_last) * v[0]), float(v[0]))
        x_pre = x[0] + (t - t_last) * v[0]
        sq_dev += (h(x_pre, v[0]) - h_ref) ** 2
        count += 1
        t_last, x, v = t, x_new, v_new
        if kind is EventKind.REFRESH:
            h_ref = h(x[0], v[0])
    if before is None:
        before = (float(x[0] + (mark - t_last) * v[0]), float(v[0]))
    x1 = float(x[0] + (T - t_last) * v[0])
    sq_dev += (h(x1, v[0]) - h_ref) ** 2
    rx, rv = _flow_residual(p1, flow, lag, before, (x1, float(v[0])))
    return rx, rv, sq_dev, count + 1


def rhmc_lag_residual(p1: Potential, T: float, lag: float, cfg: RhmcConfig, rng: RngStream) -> Tuple[float, float]:
    """Residual of a stationary 1-D RHMC path over [T - lag, T]; zero unless a refresh falls in the window."""
    path = simulate_rhmc(p1, sample_stationary(p1, rng), cfg, rng)
    before, after = eval_path(path, T - lag), eval_path(path, T)
    return _flow_residual(p1, cfg.flow, lag, (float(before.x[0]), float(before.v[0])),
                          (float(after.x[0]), float(after.v[0])))


def weak_convergence_study(dims: Sequence[int], b: float, T: float, replicates: int, seed: Optional[int] = None,
                           stream: int = 0, alpha: float = 0.0, lambda_ref: float = 1.0,
                           threads: Optional[int] = None, step: float = 1e-3,
                           permutations: int = 0, lag: float = 0.25) -> List[WeakLimitPoint]:
    """
    Energy distance between first-coordinate BPS and one-dimensional RHMC, per d.

    Both processes start at stationarity and run to T. The compared law is that
    of (x1, v1)(T) minus the 1-D Hamiltonian flow of (x1, v1)(T - lag), a
    functional of the path over the final window. Under RHMC it has an atom at
    zero of mass exp(-lambda_ref * lag). Single-time marginals are pi1 x N(0, 1)
    for every d.
    """
    if b not in (2, 4):
        raise DomainError("b", b, "b in {2, 4}")
    if not (0.0 < lag <= T):
        raise DomainError("lag", lag, f"0 < lag <= T={T}")
    seed = settings.DEFAULT_SEED if seed is None else seed
    u1 = power_scalar(b)
    p1 = make_product_potential(u1, 1)
    flow = default_flow(p1, step)
    rhmc_cfg = RhmcConfig(lambda_ref=lambda_ref, alpha=alpha, horizon=T, flow=flow)
    rhmc = np.array(run_replicates(lambda i, rng: rhmc_lag_residual(p1, T, lag, rhmc_cfg, rng),
                                   replicates, seed, stream, threads))
    bps_cfg = BpsConfig(lambda_ref=lambda_ref, alpha=alpha, horizon=T)
    points = []
    for j, d in enumerate(dims):
        base = stream + (j + 1) * replicates
        runs = run_replicates(lambda i, rng: bps_lag_residual(u1, d, T, lag, bps_cfg, flow, rng),
                              replicates, seed, base, threads)
        bps = np.array([(r[0], r[1]) for r in runs])
        rms = math.sqrt(sum(r[2] for r in runs) / sum(r[3] for r in runs))
        result = energy_distance(bps, rhmc, permutations=permutations, rng=RngStream(seed, base + replicates))
        points.append(WeakLimitPoint(d=int(d), distance=result.distance, se=result.se,
                                     p_value=result.p_value, hamiltonian_rms=rms))
        logger.info(f"weak limit b={b:g} d={d}: energy distance {result.distance:.6g} (se {result.se:.3g}), H rms {rms:.6g}")
    return points


def weak_convergence_distance(dims: Sequence[int], b: float, T: float, replicates: int, **kwargs) -> List[float]:
    return [point.distance for point in weak_convergence_study(dims, b, T, replicates, **kwargs)]


def strictly_decreasing(points: Sequence[WeakLimitPoint], n_se: float = 2.0) -> bool:
    """Each distance exceeds the next by more than n_se joint bootstrap standard errors."""
    return all(
        first.distance - second.distance > n_se * math.hypot(first.se, second.se)
        for first, second in zip(points, points[1:])
    )


def hamiltonian_deviation_rms(points: Sequence[WeakLimitPoint]) -> List[float]:
    return [point.hamiltonian_rms for point in points]


# ---------------------------------------------------------------------------
# Self-normalised CLT
# ---------------------------------------------------------------------------

def self_normalized_clt_check(u1: ScalarPotential, dims: Sequence[int], n: int, rng: RngStream,
                              condition_on: Optional[Tuple[float, float]] = None) -> List[float]:
    """
    KS distance to N(0, 1) of <grad U(X), V> / |grad U(X)| for stationary (X, V), per d.

    With condition_on = (x1, v1) the first coordinate is held fixed, which is
    the conditional form whose normal limit needs d -> infinity.
    """
    if u1.power == 2.0 or u1.hessian_bounds == (1.0, 1.0):
        draw = lambda size: rng.standard_normal(size)
    else:
        try:
            sampler = get_inverse_cdf_sampler(u1)
        except Exception as exc:
            raise UnsupportedPotentialError("self_normalized_clt_check", "stationary sampling") from exc
        draw = lambda size: sampler.sample(rng, size)
    results = []
    for d in dims:
        parts = []
        for size in batch_sizes(n, d):
            x = draw((size, d))
            v = rng.standard_normal((size, d))
            if condition_on is not None:
                x[:, 0], v[:, 0] = condition_on
            g = u1.derivative(x)
            parts.append(np.einsum("ij,ij->i", g, v) / np.linalg.norm(g, axis=1))
        statistic = float(stats.kstest(np.concatenate(parts), "norm").statistic)
        results.append(statistic)
        logger.debug(f"self-normalised CLT d={d}: KS {statistic:.4g}")
    return results
