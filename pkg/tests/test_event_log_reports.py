"""
Tests for event-log serialisation and report files.
"""

import io

import numpy as np
import pytest


def _bps_path(p, rng, **kwargs):
    from src.core.potentials import sample_stationary
    from src.db.models import BpsConfig
    from src.services.bps_service import simulate_bps

    return simulate_bps(p, sample_stationary(p, rng), BpsConfig(**kwargs), rng)


def test_event_log_round_trip(tmp_path, gaussian_2d, rng):
    from src.db.event_log import read_event_log, skeletons_equal, write_event_log

    path = _bps_path(gaussian_2d, rng, lambda_ref=1.0, alpha=0.5, horizon=30.0)
    out = tmp_path / "bps.log"
    write_event_log(out, path, seed=2019, stream=3)
    skeleton, header = read_event_log(out)
    assert skeletons_equal(skeleton, path)
    assert header["d"] == "2"
    assert header["seed"] == "2019" and header["stream"] == "3"
    assert header["process"] == "bps"
    assert float(header["alpha"]) == 0.5
    assert skeleton.meta["lambda_ref"] == 1.0


def test_event_log_is_byte_identical_for_same_seed(tmp_path, gaussian_2d):
    from src.core.rng import RngStream
    from src.db.event_log import write_event_log

    files = []
    for name in ("a.log", "b.log"):
        path = _bps_path(gaussian_2d, RngStream(11, 2), lambda_ref=1.0, max_events=500)
        write_event_log(tmp_path / name, path, seed=11, stream=2)
        files.append((tmp_path / name).read_bytes())
    assert files[0] == files[1]
    lines = files[0].decode("ascii").split("\n")
    assert lines[0].startswith("# d=2 ")
    assert " events=500 " in lines[0]
    assert lines[1].split()[1] == "Start"
    assert len(lines) == 500 + 3     # header, start, events, trailing newline
    assert b"\r" not in files[0]


def test_rhmc_log_needs_propagator_between_events(tmp_path, gaussian_2d, rng):
    from src.core.potentials import sample_stationary
    from src.db.event_log import read_event_log, skeletons_equal, write_event_log
    from src.db.models import FlowSpec, RhmcConfig
    from src.services.bps_service import Dynamics, eval_path
    from src.services.rhmc_service import simulate_rhmc

    cfg = RhmcConfig(lambda_ref=1.0, horizon=10.0, flow=FlowSpec(kind="exact_isotropic"))
    path = simulate_rhmc(gaussian_2d, sample_stationary(gaussian_2d, rng), cfg, rng)
    buffer = io.StringIO()
    write_event_log(buffer, path, seed=1)
    out = tmp_path / "rhmc.log"
    out.write_text(buffer.getvalue(), encoding="ascii")
    skeleton, header = read_event_log(out, propagator=path.propagator)
    assert header["flow"] == "exact_isotropic"
    assert skeleton.dynamics is Dynamics.HAMILTONIAN_FLOW
    assert skeletons_equal(skeleton, path)
    assert np.array_equal(eval_path(skeleton, 9.5).x, eval_path(path, 9.5).x)


def test_malformed_logs_are_rejected(tmp_path):
    from src.core.errors import DomainError
    from src.db.event_log import read_event_log

    missing_header = tmp_path / "a.log"
    missing_header.write_text("0 Start 0 0\n", encoding="ascii")
    with pytest.raises(DomainError):
        read_event_log(missing_header)
    short_record = tmp_path / "b.log"
    short_record.write_text(
        "# d=1 lambda_ref=1 alpha=0 horizon=1 seed=1 stream=0 process=bps\n0 Start 0 1\n0.5 Bounce 0.5\n",
        encoding="ascii",
    )
    with pytest.raises(DomainError):
        read_event_log(short_record)


def test_event_count_excludes_the_start_record(tmp_path, gaussian_2d, rng):
    """The header counts events only; a truncated log no longer matches it."""
    from src.core.errors import DomainError
    from src.db.event_log import read_event_log, write_event_log

    path = _bps_path(gaussian_2d, rng, lambda_ref=1.0, max_events=40)
    out = tmp_path / "bps.log"
    write_event_log(out, path, seed=5)
    skeleton, header = read_event_log(out)
    assert header["events"] == "40" and skeleton.n_events == 40
    lines = out.read_text(encoding="ascii").splitlines()
    assert len(lines) == 1 + 1 + 40
    truncated = tmp_path / "truncated.log"
    truncated.write_text("\n".join(lines[:-1]) + "\n", encoding="ascii")
    with pytest.raises(DomainError):
        read_event_log(truncated)


def test_trace_and_summary_csv_columns(tmp_path, gaussian_2d):
    from src.db.models import FlowSpec, RhmcConfig
    from src.db.reports import read_csv, write_coupling_traces, write_ensemble_summary
    from src.services.coupling_service import Metric, couple_ensemble, ensemble_summary

    cfg = RhmcConfig(lambda_ref=2.0, horizon=1.0, flow=FlowSpec(kind="exact_isotropic"))
    traces = couple_ensemble(gaussian_2d, cfg, Metric(1.0, 0.25, 1.0), 3, seed=1, grid_dt=0.5, threads=1)
    trace_file, summary_file = tmp_path / "trace.csv", tmp_path / "summary.csv"
    n_rows = write_coupling_traces(trace_file, traces)
    assert n_rows == sum(tr.times.size for tr in traces)
    rows = read_csv(trace_file)
    assert list(rows[0]) == ["replicate", "t", "d2"]
    assert {row["replicate"] for row in rows} == {"0", "1", "2"}
    assert float(rows[0]["d2"]) == traces[0].d2[0]
    write_ensemble_summary(summary_file, ensemble_summary(traces))
    summary = read_csv(summary_file)
    assert list(summary[0]) == ["t", "mean_d2", "se"]
    assert [float(row["t"]) for row in summary] == [0.0, 0.5, 1.0]


def test_ess_and_weak_limit_csv(tmp_path):
    from src.db.models import EssReport
    from src.db.reports import read_csv, write_ess_reports, write_weak_limit
    from src.services.diagnostics_service import WeakLimitPoint

    report = EssReport(function_id="f1", d=10, lambda_ref_policy="const1", n_events=1000,
                       n_samples=4000, ess=250.0, events_per_ess=4.0)
    write_ess_reports(tmp_path / "ess.csv", [report])
    rows = read_csv(tmp_path / "ess.csv")
    assert rows == [{"function": "f1", "d": "10", "policy": "const1", "replicate": "0",
                     "n_events": "1000", "ess": "250", "events_per_ess": "4"}]
    write_weak_limit(tmp_path / "weak.csv", [WeakLimitPoint(10, 0.1, 0.01, None, 0.5)])
    assert read_csv(tmp_path / "weak.csv")[0]["p_value"] == ""


def test_ess_report_cannot_exceed_sample_count():
    from pydantic import ValidationError
    from src.db.models import EssReport

    with pytest.raises(ValidationError):
        EssReport(function_id="f1", d=1, lambda_ref_policy="const1", n_events=10,
                  n_samples=100, ess=200.0, events_per_ess=0.05)


def test_certificate_and_scaling_records_round_trip(tmp_path):
    from src.db.models import ScalingFit
    from src.db.reports import read_certificate, read_scaling_fit, write_record
    from src.services.tuning_service import tune_wasserstein

    cert = tune_wasserstein(0.5, 2.0, 0.3)
    write_record(tmp_path / "cert.json", cert)
    assert read_certificate(tmp_path / "cert.json") == cert
    fit = ScalingFit(function_id="f1", policy="const1", dims=[10, 100], values=[3.0, 9.5],
                     slope=0.5, slope_ci=(0.4, 0.6))
    write_record(tmp_path / "fit.json", fit)
    assert read_scaling_fit(tmp_path / "fit.json") == fit


def test_format_summary():
    from src.db.reports import format_summary

    assert format_summary(2.0 / 3.0) == "0.666667"
    assert format_summary(None) == "nan"
