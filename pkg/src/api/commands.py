"""
Batch commands behind the `pdmp-lab` command line.

Every command takes a validated config, writes its artifacts, prints a human
summary (6 significant digits) and returns 0; failures surface as library
errors whose exit codes main() returns (2 domain, 3 numerical, 4 verification).
"""

import math
import os
from typing import Dict, List

import numpy as np

from src.core.config import settings
from src.core.errors import DegenerateEnsembleError, UnsupportedPotentialError, VerificationFailedError
from src.core.logging import logger
from src.core.potentials import make_target, sample_stationary
from src.core.rng import RngStream
from src.core.test_functions import get_test_function
from src.db.event_log import write_event_log
from src.db.models import (
    BpsConfig,
    CertifyConfig,
    CoupleConfig,
    EssBenchConfig,
    ExperimentConfig,
    RhmcConfig,
    SampleConfig,
    ScalingConfig,
    TuningCertificate,
    WeakLimitConfig,
)
from src.db.reports import (
    format_summary,
    write_coupling_traces,
    write_ensemble_summary,
    write_ess_reports,
    write_record,
    write_weak_limit,
)
from src.services.bps_service import EventKind, simulate_bps
from src.services.coupling_service import Metric, couple_ensemble, ensemble_summary, fit_contraction_rate
from src.services.diagnostics_service import ess_bench, run_scaling_study, strictly_decreasing, weak_convergence_study
from src.services.rhmc_service import default_flow, simulate_rhmc
from src.services.tuning_service import hypoco_certificate, lambda_b_bounds, tune_gaussian, tune_wasserstein

EXIT_OK = 0


def _output(cfg: ExperimentConfig, default_name: str) -> str:
    out = cfg.out or os.path.join(settings.OUTPUT_DIR, default_name)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    return out


def _sibling(path: str, suffix: str) -> str:
    root, _ = os.path.splitext(path)
    return f"{root}{suffix}"


def cmd_sample(cfg: SampleConfig) -> int:
    """Simulate one BPS or RHMC path and write its event log."""
    p = make_target(cfg.target, cfg.d)
    rng = RngStream(cfg.seed, cfg.stream)
    z0 = sample_stationary(p, rng)
    horizon = cfg.horizon if cfg.horizon is not None else math.inf
    if cfg.process == "bps":
        path = simulate_bps(p, z0, BpsConfig(lambda_ref=cfg.lambda_ref, alpha=cfg.alpha, horizon=horizon,
                                             max_events=cfg.events), rng)
    else:
        rhmc_cfg = RhmcConfig(lambda_ref=cfg.lambda_ref, alpha=cfg.alpha, horizon=horizon, max_events=cfg.events,
                              flow=default_flow(p, cfg.step))
        path = simulate_rhmc(p, z0, rhmc_cfg, rng)
    out = _output(cfg, "events.log")
    write_event_log(out, path, cfg.seed, cfg.stream)
    bounces = path.count(EventKind.BOUNCE)
    print(f"events: {path.n_events} (Bounce {bounces}, Refresh {path.count(EventKind.REFRESH)})")
    print(f"horizon: {format_summary(path.horizon)}")
    if cfg.process == "bps":
        print(f"bounce rate: {format_summary(bounces / path.horizon if path.horizon > 0 else 0.0)}")
        if p.hessian_bounds is not None:
            lower, upper = lambda_b_bounds(*p.hessian_bounds, cfg.d)
            print(f"bounce-rate bounds: [{format_summary(lower)}, {format_summary(upper)}]")
    print(f"event log: {out}")
    return EXIT_OK


def _print_certificate(cert: TuningCertificate) -> None:
    print(f"[{cert.kind}] m={format_summary(cert.m)} M={format_summary(cert.M)} alpha={format_summary(cert.alpha)}")
    for name in ("lambda_ref", "mu", "a", "b", "c", "C"):
        print(f"  {name}: {format_summary(getattr(cert, name))}")
    for name, margin in cert.margins.values.items():
        print(f"  margin[{name}]: {format_summary(margin)}")
    if cert.a_matrix_source:
        print(f"  A matrix: {cert.a_matrix_source}")
    print(f"  certified: {cert.certified}")


def _rate_certificate(m: float, M: float, alpha: float, gaussian: bool) -> TuningCertificate:
    return tune_gaussian(m, alpha, M) if gaussian else tune_wasserstein(m, M, alpha)


def cmd_tune(cfg: CertifyConfig) -> int:
    """Closed-form rates with their certificate; exit 0 iff certified."""
    cert = _rate_certificate(cfg.m, cfg.M, cfg.alpha, cfg.gaussian)
    _print_certificate(cert)
    if cfg.out:
        write_record(cfg.out, cert)
    if not cert.certified:
        raise VerificationFailedError(f"{cert.kind} certificate", cert.min_margin)
    return EXIT_OK


def _certify_grid(cfg: CertifyConfig) -> int:
    ratios = np.geomspace(1e-3, 1.0, cfg.grid_ratios)
    alphas = np.linspace(0.0, 0.99, cfg.grid_alphas)
    worst: Dict[str, tuple] = {}
    failures = 0
    for ratio in ratios:
        for alpha in alphas:
            certs = [_rate_certificate(float(ratio), 1.0, float(alpha), cfg.gaussian)]
            if not cfg.gaussian:
                certs.append(hypoco_certificate(float(ratio), 1.0, float(alpha))[0])
            for cert in certs:
                failures += not cert.certified
                if cert.kind not in worst or cert.min_margin < worst[cert.kind][0]:
                    worst[cert.kind] = (cert.min_margin, float(ratio), float(alpha))
    for kind, (margin, ratio, alpha) in worst.items():
        print(f"[{kind}] minimum margin {format_summary(margin)} at m/M={format_summary(ratio)}, alpha={format_summary(alpha)}")
    print(f"grid points: {len(ratios) * len(alphas)}, failures: {failures}")
    if failures:
        raise VerificationFailedError(f"certificate grid ({failures} failing points)",
                                      min(margin for margin, _, _ in worst.values()))
    return EXIT_OK


def cmd_certify(cfg: CertifyConfig) -> int:
    """Rate certificate plus the four hypocoercive margins, or a grid sweep with --grid."""
    if cfg.grid:
        return _certify_grid(cfg)
    cert = _rate_certificate(cfg.m, cfg.M, cfg.alpha, cfg.gaussian)
    _print_certificate(cert)
    certified = cert.certified
    if not cfg.gaussian:
        hypoco, _ = hypoco_certificate(cfg.m, cfg.M, cfg.alpha)
        _print_certificate(hypoco)
        certified = certified and hypoco.certified
        if cfg.out:
            write_record(_sibling(cfg.out, "_hypocoercive.json"), hypoco)
    if cfg.out:
        write_record(cfg.out, cert)
    if not certified:
        raise VerificationFailedError(f"certificate at m={cfg.m:g}, M={cfg.M:g}, alpha={cfg.alpha:g}")
    return EXIT_OK


def cmd_couple(cfg: CoupleConfig) -> int:
    """Coupled RHMC ensemble; compares the fitted decay rate of mean d^2 with mu."""
    p = make_target(cfg.target, cfg.d)
    if p.hessian_bounds is None:
        raise UnsupportedPotentialError("couple", "hessian_bounds (m, M)")
    m, M = p.hessian_bounds
    if cfg.gaussian:
        if p.gaussian is None:
            raise UnsupportedPotentialError("couple --gaussian", "a Gaussian form")
        cert = tune_gaussian(m, cfg.alpha, M)
        metric = Metric(cert.a, cert.b, cert.c, precision=p.gaussian.precision / m)
    else:
        cert = tune_wasserstein(m, M, cfg.alpha)
        metric = Metric(cert.a, cert.b, cert.c)
    rhmc_cfg = RhmcConfig(lambda_ref=cert.lambda_ref, alpha=cfg.alpha, horizon=cfg.horizon,
                          flow=default_flow(p, cfg.step))
    traces = couple_ensemble(p, rhmc_cfg, metric, cfg.replicates, cfg.seed, cfg.stream, cfg.grid_dt,
                             identical=cfg.identical, threads=cfg.threads)
    out = _output(cfg, "coupling_traces.csv")
    write_coupling_traces(out, traces)
    write_ensemble_summary(_sibling(out, "_summary.csv"), ensemble_summary(traces))
    try:
        mu_hat, (lo, hi) = fit_contraction_rate(traces, lambda_ref=cert.lambda_ref,
                                                rng=RngStream(cfg.seed, cfg.stream + cfg.replicates))
    except DegenerateEnsembleError as exc:
        print(f"{exc}; no contraction rate fitted")
        return exc.exit_code
    half_width = 0.5 * (hi - lo)
    passed = mu_hat >= cert.mu - 2.0 * half_width
    print(f"mu (theory): {format_summary(cert.mu)}")
    print(f"mu_hat: {format_summary(mu_hat)} (95% CI [{format_summary(lo)}, {format_summary(hi)}])")
    print(f"mu_hat >= mu - 2*ci: {'PASS' if passed else 'FAIL'}")
    print(f"traces: {out}")
    if not passed:
        raise VerificationFailedError("contraction rate", mu_hat - (cert.mu - 2.0 * half_width))
    return EXIT_OK


def cmd_scaling(cfg: ScalingConfig) -> int:
    """Events-per-ESS scaling of one test function over dimensions."""
    f = get_test_function(cfg.f)
    fit, reports = run_scaling_study(cfg.dims, cfg.policy, f, cfg.events, cfg.replicates, seed=cfg.seed,
                                     stream=cfg.stream, dt=cfg.dt, threads=cfg.threads)
    out = _output(cfg, f"scaling_{cfg.f}_{cfg.policy}.csv")
    write_ess_reports(out, reports)
    write_record(_sibling(out, "_fit.json"), fit)
    for d, value in zip(fit.dims, fit.values):
        print(f"d={d}: events/ESS {format_summary(value)}")
    print(f"slope: {format_summary(fit.slope)} (95% CI [{format_summary(fit.slope_ci[0])}, {format_summary(fit.slope_ci[1])}])")
    return EXIT_OK


def cmd_weaklimit(cfg: WeakLimitConfig) -> int:
    """Energy distances between first-coordinate BPS and 1-D RHMC laws; exit 4 unless strictly decreasing."""
    points = weak_convergence_study(cfg.dims, cfg.b, cfg.T, cfg.replicates, seed=cfg.seed, stream=cfg.stream,
                                    alpha=cfg.alpha, lambda_ref=cfg.lambda_ref, threads=cfg.threads,
                                    step=cfg.step, permutations=cfg.permutations, lag=cfg.lag)
    out = _output(cfg, f"weaklimit_b{cfg.b:g}.csv")
    write_weak_limit(out, points)
    for point in points:
        print(f"d={point.d}: distance {format_summary(point.distance)} (se {format_summary(point.se)}), "
              f"H rms {format_summary(point.hamiltonian_rms)}")
    decreasing = strictly_decreasing(points)
    print(f"strictly decreasing beyond 2 se: {'PASS' if decreasing else 'FAIL'}")
    if not decreasing:
        raise VerificationFailedError("strictly decreasing energy distances")
    return EXIT_OK


def cmd_ess_bench(cfg: EssBenchConfig) -> int:
    """Events per ESS for the seven test functions at one dimension."""
    reports = ess_bench(cfg.d, cfg.policy, cfg.events, cfg.replicates, seed=cfg.seed, stream=cfg.stream,
                        dt=cfg.dt, threads=cfg.threads)
    out = _output(cfg, f"ess_bench_d{cfg.d}_{cfg.policy}.csv")
    write_ess_reports(out, reports)
    by_function: Dict[str, List[float]] = {}
    for report in reports:
        by_function.setdefault(report.function_id, []).append(report.events_per_ess)
    for function_id, values in by_function.items():
        print(f"{function_id}: events/ESS {format_summary(float(np.mean(values)))}")
    logger.info(f"ESS bench written to {out}")
    return EXIT_OK


COMMANDS: Dict[str, tuple] = {
    "sample": (SampleConfig, cmd_sample),
    "tune": (CertifyConfig, cmd_tune),
    "certify": (CertifyConfig, cmd_certify),
    "couple": (CoupleConfig, cmd_couple),
    "scaling": (ScalingConfig, cmd_scaling),
    "weaklimit": (WeakLimitConfig, cmd_weaklimit),
    "ess-bench": (EssBenchConfig, cmd_ess_bench),
}
