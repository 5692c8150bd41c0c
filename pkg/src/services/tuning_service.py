"""
Tuning formulas and numerical certificates for the BPS/RHMC refreshment rate.

Requirements:
- Closed-form refreshment rate and contraction rate for strongly log-concave
  targets (Wasserstein coupling), for Gaussian targets, and the hypocoercive
  L2 rate that reuses the Wasserstein constants.
- Every 2x2 matrix inequality behind those rates is checked numerically with
  the closed-form eigenvalues of a symmetric 2x2 matrix; margins are reported
  relative to the scale of the matrices involved.
- Bounds on the stationary bounce rate Lambda_b and a Monte Carlo estimator.

All constructions are homogeneous: (m, M) -> (k m, k M) maps lambda_ref and mu
to sqrt(k) times themselves, b to b / sqrt(k) and c to c / k. Certificates are
evaluated after rescaling M to 1.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from src.core.config import settings
from src.core.errors import DomainError
from src.core.logging import logger
from src.core.potentials import Potential, sample_stationary_positions
from src.core.rng import RngStream, batch_sizes
from src.db.models import CertificateMargins, TuningCertificate


# ---------------------------------------------------------------------------
# 2x2 PSD engine
# ---------------------------------------------------------------------------

def min_eigenvalue_2x2(mat: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of symmetric 2x2 matrices (batched over leading axes)."""
    mat = np.asarray(mat, dtype=float)
    a11, a12, a22 = mat[..., 0, 0], mat[..., 0, 1], mat[..., 1, 1]
    half_trace = 0.5 * (a11 + a22)
    radius = np.hypot(0.5 * (a11 - a22), a12)
    return half_trace - radius


def loewner_margin(lower: np.ndarray, upper: np.ndarray, scale: float = 1.0) -> float:
    """Normalised smallest eigenvalue of upper - lower; >= 0 iff lower <= upper (Loewner order)."""
    return float(min_eigenvalue_2x2(np.asarray(upper) - np.asarray(lower))) / scale


def _sym(a11: float, a12: float, a22: float) -> np.ndarray:
    return np.array([[a11, a12], [a12, a22]], dtype=float)


def _check_domain(m: float, M: float, alpha: float) -> None:
    if not m > 0:
        raise DomainError("m", m, "m > 0")
    if not M >= m:
        raise DomainError("M", M, f"M >= m={m}")
    if not 0.0 <= alpha < 1.0:
        raise DomainError("alpha", alpha, "0 <= alpha < 1")


def equivalence_constant(a: float, b: float, c: float) -> float:
    """C = (ac + b^2 + 2 sqrt(ac b^2)) / (ac - b^2)."""
    ac, b2 = a * c, b * b
    if not b2 < ac:
        raise DomainError("b", b, f"b^2 < ac = {ac}")
    return (ac + b2 + 2.0 * math.sqrt(ac * b2)) / (ac - b2)


# ---------------------------------------------------------------------------
# Wasserstein contraction (strongly log-concave targets)
# ---------------------------------------------------------------------------

def wasserstein_rates(m: float, M: float, alpha: float) -> Dict[str, float]:
    """lambda_ref, mu and the metric constants a, b, c for the Wasserstein contraction."""
    _check_domain(m, M, alpha)
    s = M + m
    r = m / s
    lambda_ref = (2.0 * math.sqrt(s) - (1.0 - alpha) * m / math.sqrt(s)) / (1.0 - alpha * alpha)
    mu = (1.0 + alpha) * m / math.sqrt(s) - alpha * m ** 1.5 / (2.0 * s)
    b = (1.0 + alpha - alpha * r ** 0.75 + 0.75 * alpha * r) / (2.0 * math.sqrt(s))
    c = (1.0 + alpha - 0.5 * alpha * math.sqrt(r)) / s
    return {"lambda_ref": lambda_ref, "mu": mu, "a": 1.0, "b": b, "c": c}


def wasserstein_slacks(m, M, alpha, lambda_ref, mu, a, b, c) -> Dict[str, np.ndarray]:
    """
    Normalised slacks of the five inequalities equivalent to V + mW >= 0 and V + MW >= 0.

    Accepts numpy arrays for (b, c) so that whole grids are checked at once.
    Each slack is divided by the magnitude of the terms it compares.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    diag = -c * mu + c * lambda_ref * (1.0 - alpha ** 2) - 2.0 * b
    diag_scale = np.abs(c * mu) + np.abs(c * lambda_ref * (1.0 - alpha ** 2)) + np.abs(2.0 * b)
    cross = -a + b * lambda_ref * (1.0 - alpha) - mu * b
    cross_scale = abs(a) + np.abs(b * lambda_ref * (1.0 - alpha)) + np.abs(mu * b)
    slacks = {}
    for name, curv in (("M", M), ("m", m)):
        corner = -mu * a + 2.0 * curv * b
        corner_scale = abs(mu * a) + np.abs(2.0 * curv * b)
        off = cross + curv * c
        off_scale = cross_scale + np.abs(curv * c)
        slacks[name] = (
            corner / corner_scale,
            (corner * diag - off ** 2) / (corner_scale * diag_scale + off_scale ** 2),
        )
    return {
        "ineq1": slacks["M"][0],
        "ineq2": slacks["m"][0],
        "ineq3": diag / diag_scale,
        "ineq4": slacks["M"][1],
        "ineq5": slacks["m"][1],
    }


def _rescale_to_unit_M(m, M, lambda_ref, mu, b, c):
    k = 1.0 / M
    return m * k, 1.0, lambda_ref * math.sqrt(k), mu * math.sqrt(k), b / math.sqrt(k), c / k


def verify_wasserstein_inequalities(m: float, M: float, alpha: float, lambda_ref: float, mu: float,
                                    a: float, b: float, c: float,
                                    tol: Optional[float] = None) -> Tuple[bool, float]:
    """Check the five inequalities; returns (holds, smallest normalised slack)."""
    ok, margins = _wasserstein_margins(m, M, alpha, lambda_ref, mu, a, b, c, tol)
    return ok, min(margins.values())


def _wasserstein_margins(m, M, alpha, lambda_ref, mu, a, b, c, tol=None) -> Tuple[bool, Dict[str, float]]:
    tol = settings.PSD_TOL if tol is None else tol
    _check_domain(m, M, alpha)
    m1, M1, lam1, mu1, b1, c1 = _rescale_to_unit_M(m, M, lambda_ref, mu, b, c)
    slacks = {k: float(v) for k, v in wasserstein_slacks(m1, M1, alpha, lam1, mu1, a, b1, c1).items()}
    if m == M:
        # H = M I: only V + MW >= 0 is needed
        slacks = {k: slacks[k] for k in ("ineq1", "ineq3", "ineq4")}
    return min(slacks.values()) >= -tol, slacks


def tune_wasserstein(m: float, M: float, alpha: float) -> TuningCertificate:
    """
    Refreshment rate and Wasserstein contraction rate for mI <= Hess U <= MI.

    Usage example:
    ```python
    cert = tune_wasserstein(1.0, 1.0, 0.0)
    cert.lambda_ref  # 3 / sqrt(2)
    ```
    """
    rates = wasserstein_rates(m, M, alpha)
    certified, margins = _wasserstein_margins(m, M, alpha, **rates)
    if not certified:
        logger.warning(f"Wasserstein certificate failed at m={m}, M={M}, alpha={alpha}: {margins}")
    return TuningCertificate(
        kind="wasserstein",
        m=m,
        M=M,
        alpha=alpha,
        C=equivalence_constant(rates["a"], rates["b"], rates["c"]),
        certified=certified,
        min_margin=min(margins.values()),
        margins=CertificateMargins(values=margins),
        tolerance=settings.PSD_TOL,
        **rates,
    )


def verify_adjoint_equivalence(a: float, b: float, c: float, C: Optional[float] = None,
                               tol: Optional[float] = None) -> Tuple[bool, float]:
    """
    A' <= C A and A <= C A' for A = [[a, b], [b, c]] and A' = [[a, -b], [-b, c]].

    Both conditions together give d_A^2 / C <= d_A'^2 <= C d_A^2.
    """
    tol = settings.PSD_TOL if tol is None else tol
    C = equivalence_constant(a, b, c) if C is None else C
    A = _sym(a, b, c)
    A_adj = _sym(a, -b, c)
    scale = max(abs(a), abs(b), abs(c)) * (C + 1.0)
    margin = min(loewner_margin(A_adj, C * A, scale), loewner_margin(A, C * A_adj, scale))
    return margin >= -tol, margin


def maximize_mu(m: float, M: float, alpha: float, lambda_ref: Optional[float] = None,
                grid: int = 81, iterations: int = 40) -> Dict[str, float]:
    """
    Largest mu for which some (b, c) with a = 1 satisfies the five inequalities.

    Bisection over mu with an inner grid search over (b, c) around the closed-form
    constants. The result is a numerical estimate, not a certificate.
    """
    rates = wasserstein_rates(m, M, alpha)
    lam = rates["lambda_ref"] if lambda_ref is None else lambda_ref
    m1, M1, lam1, mu1, b1, c1 = _rescale_to_unit_M(m, M, lam, rates["mu"], rates["b"], rates["c"])
    factors = np.geomspace(0.125, 8.0, grid)
    bb, cc = np.meshgrid(np.concatenate([[1.0], factors]) * b1, np.concatenate([[1.0], factors]) * c1)
    bb, cc = bb.ravel(), cc.ravel()
    metric = bb ** 2 < cc

    def best(mu_value: float):
        slacks = wasserstein_slacks(m1, M1, alpha, lam1, mu_value, 1.0, bb, cc)
        worst = np.min(np.stack(list(slacks.values())), axis=0)
        worst = np.where(metric, worst, -np.inf)
        idx = int(np.argmax(worst))
        return worst[idx] >= -settings.PSD_TOL, idx

    lo, hi = 0.0, 4.0 * max(mu1, 1e-12)
    feasible, idx_lo = best(mu1)
    if feasible:
        lo = mu1
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        ok, idx = best(mid)
        if ok:
            lo, idx_lo = mid, idx
        else:
            hi = mid
    root = math.sqrt(M)
    return {
        "mu": lo * root,
        "lambda_ref": lam,
        "a": 1.0,
        "b": float(bb[idx_lo]) / root,
        "c": float(cc[idx_lo]) / M,
        "closed_form_mu": rates["mu"],
    }


# ---------------------------------------------------------------------------
# Gaussian targets
# ---------------------------------------------------------------------------

def gaussian_matrices(alpha: float, lambda_ref: float, mu: float, a: float = 1.0,
                      b: float = 0.25, c: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """V and W of the block-metric argument, in units where m = 1."""
    V = _sym(0.0, b * lambda_ref * (1.0 - alpha) - mu * b, -c * mu + c * lambda_ref * (1.0 - alpha ** 2) - 2.0 * b)
    W = _sym(2.0 * b - mu * a, c - a, 0.0)
    return V, W


def tune_gaussian(m: float, alpha: float, M: Optional[float] = None) -> TuningCertificate:
    """
    Rates for Gaussian targets with precision H, mI <= H <= MI.

    lambda_ref = 2 sqrt(m) / (1 - alpha), mu = sqrt(m) / 3; the metric constants
    a = 1, b = 1/4, c = 1 refer to units rescaled so that m = 1.
    """
    M = m if M is None else M
    _check_domain(m, M, alpha)
    lam1, mu1 = 2.0 / (1.0 - alpha), 1.0 / 3.0
    V, W = gaussian_matrices(alpha, lam1, mu1)
    kappa = M / m
    scale = max(np.abs(V).max(), np.abs(kappa * W).max(), 1.0)
    margins = {"V+mW": loewner_margin(np.zeros((2, 2)), V + W, scale)}
    if kappa > 1.0:
        margins["V+MW"] = loewner_margin(np.zeros((2, 2)), V + kappa * W, scale)
    certified = min(margins.values()) >= -settings.PSD_TOL
    if not certified:
        logger.warning(f"Gaussian certificate failed at m={m}, M={M}, alpha={alpha}: {margins}")
    root = math.sqrt(m)
    return TuningCertificate(
        kind="gaussian",
        m=m,
        M=M,
        alpha=alpha,
        lambda_ref=lam1 * root,
        mu=mu1 * root,
        a=1.0,
        b=0.25,
        c=1.0,
        C=equivalence_constant(1.0, 0.25, 1.0),
        certified=certified,
        min_margin=min(margins.values()),
        margins=CertificateMargins(values=margins),
        tolerance=settings.PSD_TOL,
    )


# ---------------------------------------------------------------------------
# Hypocoercive L2 rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CertMatrices:
    V: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    A: np.ndarray
    m: float
    M: float


def explicit_hypoco_a(m: float, M: float, alpha: float) -> np.ndarray:
    k = (-3.0 + 2.0 * m - 2.0 * M) * (-1.0 + alpha)
    s = m + M
    return _sym(
        4.0 * k / (3.0 * math.sqrt(s) * (1.0 + alpha)),
        -k / (3.0 * s),
        -k * (1.0 + alpha) / (3.0 * s ** 1.5),
    )


def hypoco_matrices(m: float, M: float, alpha: float, A: Optional[np.ndarray] = None) -> CertMatrices:
    """V, W, Z (and A, explicit unless given) of the hypocoercive estimate, at a = 1."""
    rates = wasserstein_rates(m, M, alpha)
    lam, mu, a, b, c = (rates[k] for k in ("lambda_ref", "mu", "a", "b", "c"))
    V = _sym(2.0 * a * (1.0 - alpha) * lam - a * mu, -a - (1.0 - alpha) * b * lam + b * mu, 2.0 * b - c * mu)
    W = _sym(-2.0 * b, c, 0.0)
    Z = _sym(2.0 * a * alpha * lam, -(1.0 + alpha) * b * lam, 2.0 * c * lam)
    return CertMatrices(V=V, W=W, Z=Z, A=explicit_hypoco_a(m, M, alpha) if A is None else A, m=m, M=M)


def hypoco_margins(mats: CertMatrices, A: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Normalised margins of 0 <= A, -Z <= A, A <= V + mW and A <= V + MW."""
    A = mats.A if A is None else A
    low, high = mats.V + mats.m * mats.W, mats.V + mats.M * mats.W
    scale = max(np.abs(low).max(), np.abs(high).max(), np.abs(mats.Z).max())
    return {
        "A": loewner_margin(np.zeros((2, 2)), A, scale),
        "A+Z": loewner_margin(-mats.Z, A, scale),
        "V+mW-A": loewner_margin(A, low, scale),
        "V+MW-A": loewner_margin(A, high, scale),
    }


def _search_hypoco_a(mats: CertMatrices, tol: float, steps: int = 41) -> np.ndarray:
    # candidates A = s (V + mW) + t (V + MW), then a Nelder-Mead polish of the worst margin
    low, high = mats.V + mats.m * mats.W, mats.V + mats.M * mats.W
    scale = max(np.abs(low).max(), np.abs(high).max(), np.abs(mats.Z).max())
    grid = np.linspace(0.0, 1.0, steps)
    s, t = np.meshgrid(grid, grid, indexing="ij")
    cands = s[..., None, None] * low + t[..., None, None] * high
    cands = np.concatenate([cands.reshape(-1, 2, 2), mats.A[None]], axis=0)
    worst = np.minimum.reduce([
        min_eigenvalue_2x2(cands),
        min_eigenvalue_2x2(cands + mats.Z),
        min_eigenvalue_2x2(low - cands),
        min_eigenvalue_2x2(high - cands),
    ]) / scale
    best = cands[int(np.argmax(worst))]
    if worst.max() >= -tol:
        return best

    def objective(p: np.ndarray) -> float:
        return -min(hypoco_margins(mats, _sym(*p)).values())

    result = minimize(objective, np.array([best[0, 0], best[0, 1], best[1, 1]]), method="Nelder-Mead",
                      options={"xatol": 1e-14, "fatol": 1e-16, "maxiter": 4000})
    polished = _sym(*result.x)
    if min(hypoco_margins(mats, polished).values()) > worst.max():
        return polished
    return best


def hypoco_certificate(m: float, M: float, alpha: float, tol: Optional[float] = None) -> Tuple[TuningCertificate, CertMatrices]:
    """
    Certificate for the hypocoercive L2 rate.

    The explicit A is tried first; when it violates one of the four Loewner
    conditions a feasible A is searched numerically. The returned matrices
    are in units with M rescaled to 1.
    """
    tol = settings.PSD_TOL if tol is None else tol
    _check_domain(m, M, alpha)
    m1 = m / M
    mats = hypoco_matrices(m1, 1.0, alpha)
    margins = hypoco_margins(mats)
    source = "explicit"
    if min(margins.values()) < -tol:
        A = _search_hypoco_a(mats, tol)
        mats = CertMatrices(V=mats.V, W=mats.W, Z=mats.Z, A=A, m=mats.m, M=mats.M)
        margins = hypoco_margins(mats)
        source = "searched"
    certified = min(margins.values()) >= -tol
    if not certified:
        logger.warning(f"Hypocoercive certificate failed at m={m}, M={M}, alpha={alpha}: {margins}")
    rates = wasserstein_rates(m, M, alpha)
    cert = TuningCertificate(
        kind="hypocoercive",
        m=m,
        M=M,
        alpha=alpha,
        C=equivalence_constant(rates["a"], rates["b"], rates["c"]),
        certified=certified,
        min_margin=min(margins.values()),
        margins=CertificateMargins(values=margins),
        tolerance=tol,
        a_matrix_source=source,
        **rates,
    )
    return cert, mats


def verify_hypoco_certificate(m: float, M: float, alpha: float) -> Tuple[bool, float]:
    cert, _ = hypoco_certificate(m, M, alpha)
    return cert.certified, cert.min_margin


def _sqrt_psd(X: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(X)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def _random_contraction(rng: RngStream, lo: float, hi: float) -> np.ndarray:
    # symmetric R with lo I <= R <= hi I
    theta = rng.uniform() * math.pi
    U = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    return (U * (lo + (hi - lo) * rng.uniform(2))) @ U.T


def trace_inequality_check(V: np.ndarray, W: np.ndarray, Z: np.ndarray, A: np.ndarray, m: float, M: float,
                           trials: int, rng: RngStream, tol: Optional[float] = None) -> bool:
    """
    Randomised falsification of Tr(VX + WP + ZQ) >= 0 over 0 <= Q <= X, mX <= P <= MX.

    Rank-one X along the eigenvectors of A, A + Z, V + mW - A and V + MW - A are
    tried before the random trials. Returns False on the first counterexample.
    """
    tol = settings.PSD_TOL if tol is None else tol
    scale = max(np.abs(V).max(), np.abs(M * W).max(), np.abs(Z).max(), 1e-300)

    def trace(X, P, Q) -> float:
        return float(np.trace(V @ X + W @ P + Z @ Q))

    directions = []
    for mat in (A, A + Z, V + m * W - A, V + M * W - A):
        directions.extend(np.linalg.eigh(mat)[1].T)
    for e in directions:
        X = np.outer(e, e)
        for P in (m * X, M * X):
            for Q in (np.zeros((2, 2)), X):
                value = trace(X, P, Q)
                if value < -tol * scale:
                    logger.info(f"Trace inequality counterexample along {e}: {value:.6g}")
                    return False
    for _ in range(trials):
        G = rng.standard_normal((2, 2))
        X = G @ G.T
        root = _sqrt_psd(X)
        Q = root @ _random_contraction(rng, 0.0, 1.0) @ root
        P = root @ _random_contraction(rng, m, M) @ root
        value = trace(X, P, Q)
        if value < -tol * scale * max(1.0, float(np.trace(X))):
            logger.info(f"Trace inequality counterexample: {value:.6g}")
            return False
    return True


# ---------------------------------------------------------------------------
# Bounce-rate bounds
# ---------------------------------------------------------------------------

def lambda_b_bounds(m: float, M: float, d: int, sharp: bool = False) -> Tuple[float, float]:
    """
    Bounds on the stationary bounce rate Lambda_b:
    sqrt(m (d - 1/2)) / sqrt(2 pi) <= Lambda_b <= sqrt(M d) / sqrt(2 pi).

    With sharp=True the lower bound is the radial bound
    sqrt(2m) Gamma((d+1)/2) / Gamma(d/2) / sqrt(2 pi), exact for N(0, I/m).
    """
    if not 0 < m <= M:
        raise DomainError("m", m, f"0 < m <= M={M}")
    if int(d) < 1:
        raise DomainError("d", d, "d >= 1")
    root = math.sqrt(2.0 * math.pi)
    if sharp:
        lower = math.sqrt(2.0 * m) * math.exp(gammaln((d + 1) / 2.0) - gammaln(d / 2.0)) / root
    else:
        lower = math.sqrt(m * (d - 0.5)) / root
    return lower, math.sqrt(M * d) / root


def gamma_ratio(s: float) -> float:
    """phi(s) = Gamma(s + 3/4) / (Gamma(s + 1/4) sqrt(s))."""
    if not s > 0:
        raise DomainError("s", s, "s > 0")
    return math.exp(gammaln(s + 0.75) - gammaln(s + 0.25) - 0.5 * math.log(s))


def gamma_ratio_check(s: float) -> bool:
    """Gamma(s + 3/4) / Gamma(s + 1/4) > sqrt(s), compared in log space."""
    if not s > 0:
        raise DomainError("s", s, "s > 0")
    return gammaln(s + 0.75) - gammaln(s + 0.25) > 0.5 * math.log(s)


def gamma_ratio_monotone_check(s: float, rtol: float = 1e-10) -> bool:
    """(phi(s+1) / phi(s))^2 = 1 - 1 / ((1+s)(1+4s)^2) < 1, so phi decreases towards its limit 1."""
    step = (gamma_ratio(s + 1.0) / gamma_ratio(s)) ** 2
    expected = 1.0 - 1.0 / ((1.0 + s) * (1.0 + 4.0 * s) ** 2)
    return abs(step - expected) <= rtol * expected and step < 1.0


def estimate_gradient_norm_moments(p: Potential, n_samples: int, rng: RngStream) -> Tuple[float, float]:
    """Monte Carlo E|grad U(X)| and E|grad U(X)|^2 under X ~ exp(-U)."""
    total, total_sq = 0.0, 0.0
    for size in batch_sizes(n_samples, p.dimension):
        norms = np.linalg.norm(p.gradient(sample_stationary_positions(p, size, rng)), axis=-1)
        total += float(norms.sum())
        total_sq += float(np.square(norms).sum())
    return total / n_samples, total_sq / n_samples


def estimate_lambda_b(p: Potential, n_samples: int, rng: RngStream, factorized: bool = True) -> Tuple[float, float]:
    """
    Monte Carlo estimate of Lambda_b = E <grad U(X), Z>_+ with its standard error.

    The factorized form uses E <g, Z>_+ = |g| / sqrt(2 pi) for Z ~ N(0, I).
    """
    if n_samples < 2:
        raise DomainError("n_samples", n_samples, "n_samples >= 2")
    total, total_sq = 0.0, 0.0
    for size in batch_sizes(n_samples, p.dimension):
        grads = p.gradient(sample_stationary_positions(p, size, rng))
        if factorized:
            values = np.linalg.norm(grads, axis=-1) / math.sqrt(2.0 * math.pi)
        else:
            values = np.maximum(np.einsum("ij,ij->i", grads, rng.standard_normal(grads.shape)), 0.0)
        total += float(values.sum())
        total_sq += float(np.square(values).sum())
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)
