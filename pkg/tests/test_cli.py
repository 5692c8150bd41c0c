"""
End-to-end tests of the pdmp-lab command line through main(argv).
"""

import pytest

from src.main import main


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_sample_is_byte_identical_across_runs(tmp_path, capsys):
    outputs = []
    for name in ("first.log", "second.log"):
        out = tmp_path / name
        code, stdout, _ = _run(capsys, "sample", "--process", "bps", "--target", "gaussian", "--d", "10",
                               "--events", "20000", "--seed", "7", "--out", str(out))
        assert code == 0
        assert "bounce-rate bounds" in stdout
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    assert outputs[0].count(b"\n") == 20000 + 2


def test_sample_rhmc_on_quartic(tmp_path, capsys):
    out = tmp_path / "rhmc.log"
    code, stdout, _ = _run(capsys, "sample", "--process", "rhmc", "--target", "power:4", "--d", "2",
                           "--horizon", "3", "--step", "0.01", "--out", str(out))
    assert code == 0
    assert "flow=leapfrog" in out.read_text(encoding="ascii").splitlines()[0]
    assert "bounce rate" not in stdout


def test_usage_and_domain_errors(capsys):
    code, _, err = _run(capsys, "sample", "--process", "bps", "--d", "0", "--events", "10")
    assert code == 2
    assert "d" in err
    code, _, err = _run(capsys, "sample", "--d", "3", "--events", "10")
    assert code == 1
    assert "usage" in err
    code, _, _ = _run(capsys, "sample", "--process", "bps", "--d", "3", "--events", "10", "--bogus", "1")
    assert code == 1
    code, _, _ = _run(capsys, "sample", "--process", "bps", "--d", "3", "--events", "10", "--target", "cauchy")
    assert code == 2
    code, _, _ = _run(capsys, "certify", "--m", "2", "--M", "1")
    assert code == 2


def test_certify_reports_wasserstein_constants(tmp_path, capsys):
    out = tmp_path / "cert.json"
    code, stdout, _ = _run(capsys, "certify", "--m", "1", "--M", "1", "--alpha", "0", "--out", str(out))
    assert code == 0
    for expected in ("lambda_ref: 2.12132", "mu: 0.707107", "b: 0.353553", "c: 0.5", "C: 3", "certified: True"):
        assert expected in stdout
    assert "[hypocoercive]" in stdout
    assert (tmp_path / "cert_hypocoercive.json").exists()

    from src.db.reports import read_certificate
    assert read_certificate(out).kind == "wasserstein"


def test_tune_gaussian_defaults_upper_bound_to_m(capsys):
    code, stdout, _ = _run(capsys, "tune", "--gaussian", "--m", "4")
    assert code == 0
    assert "lambda_ref: 4" in stdout
    assert "mu: 0.666667" in stdout
    assert "M=4" in stdout


def test_certify_small_grid(capsys):
    code, stdout, _ = _run(capsys, "certify", "--grid", "--grid-ratios", "3", "--grid-alphas", "2")
    assert "grid points: 6, failures: " in stdout
    assert (code == 0) == ("failures: 0" in stdout)
    assert "[wasserstein] minimum margin" in stdout
    assert "[hypocoercive] minimum margin" in stdout


def test_couple_identical_ensemble_is_degenerate(tmp_path, capsys):
    out = tmp_path / "traces.csv"
    code, stdout, _ = _run(capsys, "couple", "--identical", "--replicates", "5", "--horizon", "1",
                           "--threads", "1", "--out", str(out))
    assert code == 3
    assert "degenerate ensemble" in stdout
    from src.db.reports import read_csv
    rows = read_csv(out)
    assert list(rows[0]) == ["replicate", "t", "d2"]
    assert all(float(row["d2"]) == 0.0 for row in rows)
    assert list(read_csv(tmp_path / "traces_summary.csv")[0]) == ["t", "mean_d2", "se"]


def test_couple_gaussian_passes(tmp_path, capsys):
    code, stdout, _ = _run(capsys, "couple", "--replicates", "150", "--horizon", "4", "--threads", "2",
                           "--out", str(tmp_path / "traces.csv"))
    assert code == 0
    assert "mu (theory): 0.333333" in stdout
    assert "PASS" in stdout


def test_couple_needs_hessian_bounds(capsys):
    code, _, _ = _run(capsys, "couple", "--target", "power:4", "--replicates", "2")
    assert code == 2


def test_config_file_with_flag_override(tmp_path, capsys):
    config = tmp_path / "run.conf"
    config.write_text("# sample run\nprocess = rhmc\nd = 3\nhorizon = 5\nlambda-ref = 2.0\n", encoding="utf-8")
    out = tmp_path / "events.log"
    code, _, _ = _run(capsys, "sample", "--config", str(config), "--d", "2", "--out", str(out))
    assert code == 0
    header = out.read_text(encoding="ascii").splitlines()[0]
    assert "d=2 " in header
    assert "process=rhmc" in header
    assert "lambda_ref=2 " in header


def test_config_file_unknown_key(tmp_path, capsys):
    config = tmp_path / "bad.conf"
    config.write_text("process = bps\nwidth = 3\n", encoding="utf-8")
    code, _, err = _run(capsys, "sample", "--config", str(config), "--d", "2", "--events", "5")
    assert code == 1
    assert "unknown key 'width'" in err


def test_read_config_file_parses_dims(tmp_path):
    from src.main import read_config_file

    config = tmp_path / "scaling.conf"
    config.write_text("dims = 10, 100,1000  # three sizes\npolicy=sqrtd\n", encoding="utf-8")
    assert read_config_file(str(config), ["dims", "policy"]) == {"dims": [10, 100, 1000], "policy": "sqrtd"}


def test_scaling_and_ess_bench_commands(tmp_path, capsys):
    out = tmp_path / "scaling.csv"
    code, stdout, _ = _run(capsys, "scaling", "--dims", "2,4", "--events", "3000", "--replicates", "2",
                           "--threads", "1", "--out", str(out))
    assert code == 0
    assert "slope:" in stdout
    assert (tmp_path / "scaling_fit.json").exists()
    code, stdout, _ = _run(capsys, "ess-bench", "--d", "2", "--events", "3000", "--threads", "1",
                           "--out", str(tmp_path / "bench.csv"))
    assert code == 0
    assert "f7: events/ESS" in stdout


def test_weaklimit_window_longer_than_horizon_is_a_domain_error(capsys):
    code, _, err = _run(capsys, "weaklimit", "--dims", "2", "--T", "1", "--lag", "2", "--replicates", "10")
    assert code == 2
    assert "lag" in err


@pytest.mark.slow
def test_weaklimit_distances_decrease(tmp_path, capsys):
    code, stdout, _ = _run(capsys, "weaklimit", "--b", "2", "--dims", "10,100,1000", "--T", "5",
                           "--lag", "0.5", "--replicates", "3000", "--out", str(tmp_path / "weak.csv"))
    assert code == 0
    assert "PASS" in stdout


@pytest.mark.slow
def test_scaling_slope_for_first_coordinate(tmp_path, capsys):
    code, stdout, _ = _run(capsys, "scaling", "--f", "f1", "--dims", "10,100,1000", "--policy", "const1",
                           "--out", str(tmp_path / "scaling.csv"))
    assert code == 0
    from src.db.reports import read_scaling_fit
    assert 0.3 <= read_scaling_fit(tmp_path / "scaling_fit.json").slope <= 0.65


def test_failed_certificate_exits_with_verification_code(monkeypatch, capsys):
    import src.api.commands as commands

    real = commands.tune_wasserstein
    monkeypatch.setattr(commands, "tune_wasserstein",
                        lambda m, M, alpha: real(m, M, alpha).model_copy(update={"certified": False, "min_margin": -0.5}))
    code, stdout, err = _run(capsys, "tune", "--m", "1")
    assert code == 4
    assert "certified: False" in stdout
    assert "wasserstein certificate failed (margin -0.5)" in err
