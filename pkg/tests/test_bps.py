"""
Tests for exact BPS simulation: reflection, event-time samplers, refreshment and paths.
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats


def test_bounce_reflect_examples():
    from src.services.bps_service import bounce_reflect

    assert np.allclose(bounce_reflect(np.array([1.0, 0.0]), np.array([2.0, 3.0])), [-2.0, 3.0])
    assert np.allclose(bounce_reflect(np.array([1.0, 1.0]), np.array([2.0, 2.0])), [-2.0, -2.0])
    reflected = bounce_reflect(np.array([1.0, 2.0]), np.array([3.0, 0.0]))
    assert np.allclose(reflected, [9.0 / 5.0, -12.0 / 5.0])
    assert np.linalg.norm(reflected) == pytest.approx(3.0, rel=8 * np.finfo(float).eps)


def test_bounce_reflect_preserves_norm(rng):
    from src.services.bps_service import bounce_reflect

    for _ in range(1000):
        g, v = rng.standard_normal(3), rng.standard_normal(3)
        out = bounce_reflect(g, v)
        assert abs(np.linalg.norm(out) - np.linalg.norm(v)) <= 8 * np.finfo(float).eps * np.linalg.norm(v)


def test_bounce_reflect_errors():
    from src.core.errors import DegenerateBounceError, DimensionMismatchError
    from src.services.bps_service import bounce_reflect

    with pytest.raises(DegenerateBounceError):
        bounce_reflect(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(DimensionMismatchError):
        bounce_reflect(np.ones(3), np.ones(2))


def test_bounce_rate_examples(gaussian_2d):
    from src.core.phase_space import PhasePoint
    from src.core.potentials import make_power_potential
    from src.services.bps_service import bounce_rate

    assert bounce_rate(gaussian_2d, PhasePoint([1.0, 0.0], [1.0, 0.0])) == 1.0
    assert bounce_rate(gaussian_2d, PhasePoint([1.0, 0.0], [-1.0, 0.0])) == 0.0
    quartic = make_power_potential(4, 1)
    assert bounce_rate(quartic, PhasePoint([1.0], [2.0])) == pytest.approx(4.0)


def test_gaussian_bounce_time_closed_form():
    """tau inverts Lambda(t) = E exactly on the worked examples."""
    from src.services.bps_service import integrated_gaussian_rate, sample_bounce_time_gaussian

    assert sample_bounce_time_gaussian(1.0, 1.0, exponential=1.5) == pytest.approx(1.0)
    assert sample_bounce_time_gaussian(-2.0, 1.0, exponential=0.5) == pytest.approx(3.0)
    quad, _ = integrate.quad(lambda t: max(1.0 + t, 0.0), 0.0, 1.0)
    assert quad == pytest.approx(1.5)
    assert integrated_gaussian_rate(-2.0, 1.0, 3.0) == pytest.approx(0.5)


def test_gaussian_bounce_time_rejects_non_positive_slope():
    from src.core.errors import DomainError
    from src.services.bps_service import sample_bounce_time_gaussian

    with pytest.raises(DomainError):
        sample_bounce_time_gaussian(1.0, 0.0, exponential=1.0)


def test_gaussian_bounce_time_distribution(rng):
    """At (a, s) = (0, 1) the survival is exp(-t^2 / 2)."""
    from src.services.bps_service import sample_bounce_time_gaussian

    draws = [sample_bounce_time_gaussian(0.0, 1.0, rng) for _ in range(100_000)]
    statistic = stats.kstest(draws, lambda t: 1.0 - np.exp(-0.5 * np.square(t))).statistic
    assert statistic < 0.01


def test_thinning_matches_closed_form_on_gaussian(gaussian_2d, rng):
    """Thinned bounce times follow the closed-form law 1 - exp(-Lambda(t))."""
    from src.core.phase_space import PhasePoint
    from src.services.bps_service import integrated_gaussian_rate, sample_bounce_time_thinning

    z = PhasePoint([0.5, -0.2], [1.0, 0.3])
    a, s = float(np.dot(z.x, z.v)), float(np.dot(z.v, z.v))
    draws = [sample_bounce_time_thinning(gaussian_2d, z, None, rng) for _ in range(50_000)]
    cdf = np.vectorize(lambda t: 1.0 - math.exp(-integrated_gaussian_rate(a, s, t)))
    assert stats.kstest(draws, cdf).statistic < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("pair", range(10))
def test_thinning_matches_closed_form_on_random_rays(pair, gaussian_2d, rng):
    """Thinning agrees with the closed-form law for seeded random (a, s) = (<x, v>, |v|^2)."""
    from src.core.phase_space import PhasePoint
    from src.core.rng import RngStream
    from src.services.bps_service import integrated_gaussian_rate, sample_bounce_time_thinning

    start = RngStream(31, pair)
    z = PhasePoint(start.standard_normal(2), start.standard_normal(2))
    a, s = float(np.dot(z.x, z.v)), float(np.dot(z.v, z.v))
    draws = [sample_bounce_time_thinning(gaussian_2d, z, None, rng) for _ in range(100_000)]
    cdf = np.vectorize(lambda t: 1.0 - math.exp(-integrated_gaussian_rate(a, s, t)))
    assert stats.kstest(draws, cdf).statistic < 0.01


def test_thinning_envelope_dominates_true_rate(anisotropic_gaussian, rng):
    """(<grad U(x0), v>)_+ + M |v|^2 t >= <grad U(x0 + t v), v>_+ for t < slice."""
    from src.services.bps_service import default_thinning_slice

    M = anisotropic_gaussian.hessian_bounds[1]
    for _ in range(1000):
        x, v = rng.standard_normal(2), rng.standard_normal(2)
        t = rng.uniform() * default_thinning_slice(float(np.linalg.norm(v)), M)
        envelope = max(0.0, float(np.dot(anisotropic_gaussian.gradient(x), v))) + M * float(np.dot(v, v)) * t
        true = max(0.0, float(np.dot(anisotropic_gaussian.gradient(x + t * v), v)))
        assert true <= envelope + 1e-12


def test_thinning_with_zero_velocity_never_bounces(gaussian_2d, rng):
    from src.core.phase_space import PhasePoint
    from src.services.bps_service import sample_bounce_time_thinning

    assert math.isinf(sample_bounce_time_thinning(gaussian_2d, PhasePoint([1.0, 1.0], [0.0, 0.0]), None, rng))


def test_thinning_requires_hessian_bounds(quartic_3d, rng):
    from src.core.errors import UnsupportedPotentialError
    from src.core.phase_space import PhasePoint
    from src.services.bps_service import sample_bounce_time_thinning

    with pytest.raises(UnsupportedPotentialError):
        sample_bounce_time_thinning(quartic_3d, PhasePoint(np.ones(3), np.ones(3)), None, rng)


def test_polynomial_bounce_time_inverts_integrated_rate():
    """For (t^2 - 1)_+ the integrated rate is t^3 / 3 - t + 2 / 3 beyond t = 1."""
    from src.services.bps_service import sample_bounce_time_polynomial

    for e in (0.1, 1.0, 5.0):
        tau = sample_bounce_time_polynomial(np.array([-1.0, 0.0, 1.0]), exponential=e)
        assert tau > 1.0
        assert tau ** 3 / 3.0 - tau + 2.0 / 3.0 == pytest.approx(e, rel=1e-10)


def test_polynomial_bounce_time_with_bounded_mass_returns_inf():
    """A rate that is positive only on (0, 1) integrates to 1/6 and cannot reach E = 1."""
    from src.services.bps_service import sample_bounce_time_polynomial

    assert math.isinf(sample_bounce_time_polynomial(np.array([0.0, 1.0, -1.0]), exponential=1.0))
    tau = sample_bounce_time_polynomial(np.array([0.0, 1.0, -1.0]), exponential=0.1)
    mass, _ = integrate.quad(lambda t: max(t - t * t, 0.0), 0.0, tau)
    assert mass == pytest.approx(0.1, rel=1e-9)


def test_refresh_velocity_full_and_partial(rng):
    from src.core.errors import DomainError
    from src.services.bps_service import refresh_velocity

    v = np.array([3.0, -2.0])
    full = np.array([refresh_velocity(v, 0.0, rng) for _ in range(100_000)])
    assert np.abs(full.mean(axis=0)).max() < 0.02
    assert np.abs(full.var(axis=0) - 1.0).max() < 0.02
    partial = np.array([refresh_velocity(v, 0.999, rng) for _ in range(10_000)])
    assert np.allclose(partial.mean(axis=0), 0.999 * v, atol=0.01)
    assert np.allclose(refresh_velocity(v, 0.5, xi=np.zeros(2)), 0.5 * v)
    with pytest.raises(DomainError):
        refresh_velocity(v, 1.0, rng)


def test_refresh_velocity_keeps_standard_normal_invariant(rng):
    from src.services.bps_service import refresh_velocity

    v = rng.standard_normal((100_000, 3))
    out = refresh_velocity(v, 0.7, rng)
    assert np.allclose(np.cov(out.T), np.eye(3), atol=0.02)


def test_speed_is_conserved_without_refreshment(gaussian_10d, rng):
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import EventKind, simulate_bps

    z0 = sample_stationary(gaussian_10d, rng)
    path = simulate_bps(gaussian_10d, z0, BpsConfig(lambda_ref=0.0, horizon=200.0), rng)
    assert path.n_events > 0
    assert path.count(EventKind.REFRESH) == 0
    speeds = np.linalg.norm(path.vs, axis=1)
    assert np.allclose(speeds, z0.speed(), rtol=1e-10)


def test_event_times_increase_and_refresh_keeps_position(gaussian_2d, rng):
    """Events lie in (0, horizon], bounces preserve |v|, refreshes keep x continuous."""
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import EventKind, simulate_bps

    path = simulate_bps(gaussian_2d, sample_stationary(gaussian_2d, rng), BpsConfig(lambda_ref=1.0, horizon=500.0), rng)
    assert np.all(np.diff(path.times) > 0)
    assert path.times[0] > 0 and path.times[-1] <= path.horizon
    starts, xs, vs = path.segment_starts()
    for i, kind in enumerate(path.kinds):
        before_x = xs[i] + (starts[i + 1] - starts[i]) * vs[i]
        assert np.allclose(before_x, xs[i + 1], atol=1e-9)
        if kind is EventKind.BOUNCE:
            assert np.linalg.norm(vs[i + 1]) == pytest.approx(np.linalg.norm(vs[i]), rel=1e-12)


def test_downhill_with_fast_refresh_gives_only_refreshes(gaussian_2d, rng):
    from src.core.phase_space import PhasePoint
    from src.db.models import BpsConfig
    from src.services.bps_service import EventKind, simulate_bps

    z0 = PhasePoint([10.0, 0.0], [-1.0, 0.0])
    path = simulate_bps(gaussian_2d, z0, BpsConfig(lambda_ref=100.0, alpha=0.999, horizon=1.0), rng)
    assert path.n_events > 50
    assert path.count(EventKind.BOUNCE) == 0


def test_event_budget_sets_realized_horizon(gaussian_2d, rng):
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps

    path = simulate_bps(gaussian_2d, sample_stationary(gaussian_2d, rng), BpsConfig(lambda_ref=1.0, max_events=1000), rng)
    assert path.n_events == 1000
    assert path.horizon == path.times[-1]


def test_bps_config_requires_a_bounded_run():
    from pydantic import ValidationError
    from src.db.models import BpsConfig

    with pytest.raises(ValidationError):
        BpsConfig(lambda_ref=1.0)
    with pytest.raises(ValidationError):
        BpsConfig(lambda_ref=1.0, alpha=1.0, horizon=1.0)


def test_simulation_is_reproducible(gaussian_2d):
    from src.core.potentials import sample_stationary
    from src.core.rng import RngStream
    from src.db.event_log import skeletons_equal
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps

    def run():
        rng = RngStream(11, 4)
        return simulate_bps(gaussian_2d, sample_stationary(gaussian_2d, rng), BpsConfig(lambda_ref=1.0, horizon=50.0), rng)

    assert skeletons_equal(run(), run())


def test_eval_path_conventions(gaussian_2d, rng):
    from src.core.errors import DomainError
    from src.core.phase_space import PhasePoint
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import Dynamics, PathSkeleton, eval_path, simulate_bps

    free = PathSkeleton(t0=0.0, z0=PhasePoint([0.0], [1.0]), times=np.empty(0), kinds=(),
                        xs=np.empty((0, 1)), vs=np.empty((0, 1)), dynamics=Dynamics.LINEAR, horizon=5.0)
    z = eval_path(free, 2.5)
    assert z.x[0] == 2.5 and z.v[0] == 1.0
    with pytest.raises(DomainError):
        eval_path(free, 6.0)

    path = simulate_bps(gaussian_2d, sample_stationary(gaussian_2d, rng), BpsConfig(lambda_ref=1.0, horizon=20.0), rng)
    for t, _, state in path.events:
        assert eval_path(path, t) == state


def test_stationary_time_averages_standard_gaussian(gaussian_10d, rng):
    """Path averages of f1 and f6 stay within 4 Monte Carlo standard errors of 0 and 1."""
    from src.core.potentials import sample_stationary
    from src.core.test_functions import TEST_FUNCTIONS
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps
    from src.services.diagnostics_service import estimate_ess, path_time_average

    path = simulate_bps(gaussian_10d, sample_stationary(gaussian_10d, rng), BpsConfig(lambda_ref=1.0, horizon=1e4), rng)
    for fid, target in (("f1", 0.0), ("f6", 1.0), ("f7", 0.0)):
        f = TEST_FUNCTIONS[fid]
        _, mcse = estimate_ess(path, f)
        assert abs(path_time_average(path, f) - target) < 4 * mcse


def test_stationary_time_average_quartic(quartic_3d, rng):
    """Exact polynomial event times leave exp(-U) invariant: E[x1^2] matches quadrature."""
    from src.core.potentials import get_inverse_cdf_sampler, power_scalar, sample_stationary
    from src.core.test_functions import TEST_FUNCTIONS
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps
    from src.services.diagnostics_service import estimate_ess, path_time_average

    path = simulate_bps(quartic_3d, sample_stationary(quartic_3d, rng), BpsConfig(lambda_ref=1.0, horizon=5000.0), rng)
    f6 = TEST_FUNCTIONS["f6"]
    exact = get_inverse_cdf_sampler(power_scalar(4)).moment(np.square)
    _, mcse = estimate_ess(path, f6)
    assert abs(path_time_average(path, f6) - exact) < 4 * mcse


def test_stationary_time_average_under_thinning(rng):
    """Thinned bounces on x^2 / 2 + log cosh x (m = 1, M = 2) keep E[x1^2] and E[x1]."""
    from src.core.potentials import ScalarPotential, make_product_potential, sample_stationary
    from src.core.test_functions import TEST_FUNCTIONS
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps
    from src.services.diagnostics_service import estimate_ess, path_time_average

    log_cosh = lambda x: np.logaddexp(x, -x) - math.log(2.0)
    u1 = ScalarPotential(
        name="quadratic+logcosh",
        value=lambda x: 0.5 * np.square(x) + log_cosh(x),
        derivative=lambda x: np.asarray(x, dtype=float) + np.tanh(x),
        hessian_bounds=(1.0, 2.0),
    )
    p = make_product_potential(u1, 2)
    assert not p.exact_event_sampler

    weight = lambda x: math.exp(-0.5 * x * x - float(log_cosh(x)))
    norm, _ = integrate.quad(weight, -np.inf, np.inf, epsrel=1e-12)
    second, _ = integrate.quad(lambda x: x * x * weight(x), -np.inf, np.inf, epsrel=1e-12)
    exact = second / norm
    assert 0.5 < exact < 1.0

    path = simulate_bps(p, sample_stationary(p, rng), BpsConfig(lambda_ref=1.0, horizon=5000.0), rng)
    for fid, target in (("f6", exact), ("f1", 0.0)):
        f = TEST_FUNCTIONS[fid]
        _, mcse = estimate_ess(path, f)
        assert abs(path_time_average(path, f) - target) < 5 * mcse


def test_realized_bounce_rate_matches_stationary_rate(rng):
    """Bounces per unit time of a stationary run agree with E|X| / sqrt(2 pi) and lie near the bounds."""
    from src.core.potentials import make_isotropic_gaussian, sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import EventKind, simulate_bps
    from src.services.tuning_service import lambda_b_bounds

    d = 10
    p = make_isotropic_gaussian(d)
    path = simulate_bps(p, sample_stationary(p, rng), BpsConfig(lambda_ref=1.0, max_events=200_000), rng)
    realized = path.count(EventKind.BOUNCE) / path.horizon
    exact, _ = lambda_b_bounds(1.0, 1.0, d, sharp=True)
    lower, upper = lambda_b_bounds(1.0, 1.0, d)
    assert lower <= exact <= upper
    assert realized == pytest.approx(exact, rel=0.03)
    assert 0.97 * lower <= realized <= 1.03 * upper


def test_refresh_count_grows_with_lambda_ref(gaussian_2d, rng):
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import EventKind, simulate_bps

    horizon = 2000.0
    rates = []
    for lam in (1.0, 5.0):
        path = simulate_bps(gaussian_2d, sample_stationary(gaussian_2d, rng), BpsConfig(lambda_ref=lam, horizon=horizon), rng)
        rates.append(path.count(EventKind.REFRESH) / horizon)
        assert rates[-1] == pytest.approx(lam, abs=4 * math.sqrt(lam / horizon))
    assert rates[1] > rates[0]
