import csv
import json

import numpy as np
import pytest

from surrogate_cv import cli
from surrogate_cv.cli import main
from surrogate_cv.config import default_configuration
from surrogate_cv.data_model import (
    PairedDataset,
    SurrogateDataset,
    load_paired,
    load_surrogate,
    write_paired,
    write_surrogate,
)
from surrogate_cv.errors import InvariantViolation
from surrogate_cv.estimator import REPORT_KEYS
from surrogate_cv.mcf import load_model, ols_coefficients
from surrogate_cv.synthetic import NonlinearPopulation


def run_cli(capsys, *argv):
    code = main([str(arg) for arg in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_of(err):
    for line in reversed(err.strip().splitlines()):
        if line.startswith('{"error"'):
            return json.loads(line)
    raise AssertionError(f"no structured error in stderr:\n{err}")


@pytest.fixture
def identical_files(tmp_path, identical_data):
    paired, surrogate = identical_data
    paired_path, pool_path = str(tmp_path / "paired.csv"), str(tmp_path / "pool.csv")
    write_paired(paired, paired_path)
    write_surrogate(surrogate, pool_path)
    return paired_path, pool_path


@pytest.fixture
def nonlinear_files(tmp_path):
    paired, surrogate = NonlinearPopulation(seed=3).sample(200, 1000)
    paired_path, pool_path = str(tmp_path / "paired.csv"), str(tmp_path / "pool.csv")
    write_paired(paired, paired_path)
    write_surrogate(surrogate, pool_path)
    return paired_path, pool_path


@pytest.fixture
def linear_file(tmp_path, rng):
    g = rng.normal(size=40)
    path = str(tmp_path / "linear.csv")
    write_paired(PairedDataset.from_arrays(2.0 * g + 1.0, g), path)
    return path


class TestPlan:
    def test_reported_reduction(self, capsys):
        code, out, _ = run_cli(capsys, "plan", "--n-r", 715, "--k", 1669, "--rho", 0.79)
        assert code == 0
        report = json.loads(out)
        assert 340 <= report["n_min_ceil"] <= 360
        assert 0.50 <= report["reduction"] <= 0.53
        assert report["rho_sq"] == pytest.approx(0.79 ** 2)

    def test_negligible_reduction(self, capsys):
        _, out, _ = run_cli(capsys, "plan", "--n-r", 200, "--k", 400, "--rho", 0.0728)
        report = json.loads(out)
        assert report["n_min_ceil"] == 200
        assert report["reduction"] == 0.0

    def test_no_pool(self, capsys):
        _, out, _ = run_cli(capsys, "plan", "--n-r", 300, "--k", 0, "--rho-sq", 0.9)
        report = json.loads(out)
        assert report["n_min"] == 300
        assert report["reduction"] == 0.0

    def test_invalid_rho(self, capsys):
        code, _, err = run_cli(capsys, "plan", "--n-r", 100, "--k", 10, "--rho", 1.5)
        assert code == 1
        assert error_of(err)["error"] == "InvalidArgument"

    def test_rho_and_rho_sq_exclusive(self, capsys):
        code, _, err = run_cli(capsys, "plan", "--n-r", 100, "--k", 10, "--rho", 0.5, "--rho-sq", 0.25)
        assert code == 1
        assert error_of(err)["error"] == "InvalidArgument"


class TestEstimate:
    def test_paired_only(self, capsys, identical_files):
        code, out, _ = run_cli(capsys, "estimate", "--paired", identical_files[0])
        assert code == 0
        payload = json.loads(out)
        assert [report["method"] for report in payload["reports"]] == ["MC"]
        assert tuple(payload["reports"][0]) == REPORT_KEYS
        assert payload["mcf_worthwhile"] is None

    def test_surrogate_pool_tightens_estimate(self, capsys, identical_files):
        paired_path, pool_path = identical_files
        _, out, _ = run_cli(capsys, "estimate", "--paired", paired_path, "--surrogate", pool_path)
        mc, cv = json.loads(out)["reports"]
        assert cv["method"] == "CV"
        assert cv["var_hat"] <= mc["var_hat"]
        assert cv["ci"]["delta"] == 0.1

    def test_metric_correlator_report(self, capsys, nonlinear_files):
        paired_path, pool_path = nonlinear_files
        code, out, _ = run_cli(
            capsys, "estimate", "--paired", paired_path, "--surrogate", pool_path,
            "--mcf", "ols", "--n-fit", 50, "--select", "auto",
        )
        assert code == 0
        payload = json.loads(out)
        assert [report["method"] for report in payload["reports"]] == ["MC", "CV", "CV_MCF"]
        mcf_report = payload["reports"][2]
        assert mcf_report["n_fit"] == 50
        assert mcf_report["n"] == 150
        assert mcf_report["rho_sq_raw"] is not None and mcf_report["rho_sq"] is not None
        assert isinstance(payload["mcf_worthwhile"], bool)
        assert payload["selected"] in ("CV", "CV_MCF")

    def test_alpha_mode(self, capsys, identical_files):
        _, out, _ = run_cli(capsys, "estimate", "--paired", identical_files[0], "--alpha", 0.5)
        ci = json.loads(out)["reports"][0]["ci"]
        assert ci["radius"] == 0.5
        assert 0.0 <= ci["delta"] <= 1.0

    def test_output_file_is_deterministic(self, capsys, tmp_path, identical_files):
        paired_path, pool_path = identical_files
        outputs = [tmp_path / "first.json", tmp_path / "second.json"]
        for output in outputs:
            assert run_cli(capsys, "estimate", "--paired", paired_path, "--surrogate", pool_path, "--out", output)[0] == 0
        assert outputs[0].read_bytes() == outputs[1].read_bytes()

    def test_missing_input(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "estimate", "--paired", tmp_path / "absent.csv")
        assert code == 1
        assert error_of(err)["error"] == "SchemaError"

    def test_dimension_mismatch(self, capsys, tmp_path, identical_files, rng):
        pool_path = str(tmp_path / "wide.csv")
        write_surrogate(SurrogateDataset.from_arrays(rng.normal(size=(5, 2))), pool_path)
        code, _, err = run_cli(capsys, "estimate", "--paired", identical_files[0], "--surrogate", pool_path)
        assert code == 1
        assert error_of(err)["error"] == "DimensionMismatch"

    def test_n_fit_requires_correlator(self, capsys, identical_files):
        code, _, _ = run_cli(capsys, "estimate", "--paired", identical_files[0], "--n-fit", 10)
        assert code == 1

    @pytest.mark.parametrize("name, content", [
        ("paired.csv", b"scenario_id,F,G_1\na,1,\xff\xfe\nb,2,3\n"),
        ("paired.jsonl", b'{"scenario_id": "a", "f": 1' + b"0" * 400 + b', "g": [1]}\n'),
    ])
    def test_undecodable_input_is_data_error(self, capsys, tmp_path, name, content):
        path = tmp_path / name
        path.write_bytes(content)
        code, _, err = run_cli(capsys, "estimate", "--paired", path)
        assert code == 1
        assert error_of(err)["error"] == "ParseError"

    def test_invalid_config(self, capsys, write_text, identical_files):
        config = write_text("bad.yaml", "logging: [oops\n")
        code, _, err = run_cli(capsys, "estimate", "--paired", identical_files[0], "--config", config)
        assert code == 1
        assert error_of(err)["error"] == "ConfigError"


class TestTrainMcf:
    def test_ols_slope(self, capsys, tmp_path, linear_file):
        model_path = tmp_path / "model.json"
        code, out, _ = run_cli(
            capsys, "train-mcf", "--paired", linear_file, "--model", "ols", "--n-fit", 30, "--out", model_path
        )
        assert code == 0
        metrics = json.loads(out)
        assert (metrics["n_train"], metrics["n_holdout"]) == (30, 10)
        assert metrics["holdout_pearson"] == pytest.approx(1.0)
        slopes, intercept = ols_coefficients(load_model(str(model_path)))
        assert slopes[0] == pytest.approx(2.0)
        assert intercept == pytest.approx(1.0)

    def test_same_seed_gives_identical_file(self, capsys, tmp_path, linear_file):
        paths = [tmp_path / "a.json", tmp_path / "b.json"]
        for path in paths:
            code, _, _ = run_cli(
                capsys, "train-mcf", "--paired", linear_file, "--model", "mlp",
                "--hidden", "4,4", "--epochs", 15, "--seed", 11, "--out", path,
            )
            assert code == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_out_of_domain_only(self, capsys, tmp_path, linear_file, rng):
        other = str(tmp_path / "other.csv")
        g = rng.normal(size=60)
        write_paired(PairedDataset.from_arrays(2.0 * g + 1.5, g), other)
        code, out, _ = run_cli(
            capsys, "train-mcf", "--paired", linear_file, "--extra-fit", other,
            "--n-fit", 0, "--model", "ols", "--out", tmp_path / "model.json",
        )
        assert code == 0
        metrics = json.loads(out)
        assert (metrics["n_train"], metrics["n_holdout"]) == (60, 40)

    def test_reuse_in_estimate(self, capsys, tmp_path, nonlinear_files):
        paired_path, pool_path = nonlinear_files
        model_path = tmp_path / "model.json"
        run_cli(capsys, "train-mcf", "--paired", paired_path, "--model", "ols", "--out", model_path)
        code, out, _ = run_cli(
            capsys, "estimate", "--paired", paired_path, "--surrogate", pool_path, "--mcf-model", model_path
        )
        assert code == 0
        mcf_report = json.loads(out)["reports"][-1]
        assert (mcf_report["method"], mcf_report["n_fit"], mcf_report["n"]) == ("CV_MCF", 0, 200)

    def test_requires_output_path(self, capsys, linear_file):
        code, _, err = run_cli(capsys, "train-mcf", "--paired", linear_file)
        assert code == 1
        assert "--out" in error_of(err)["message"]

    def test_no_training_samples(self, capsys, tmp_path, linear_file):
        code, _, err = run_cli(
            capsys, "train-mcf", "--paired", linear_file, "--n-fit", 0, "--out", tmp_path / "model.json"
        )
        assert code == 1
        assert error_of(err)["error"] == "InsufficientData"


class TestSimulation:
    def test_sweep_k_csv(self, capsys, tmp_path):
        table = tmp_path / "sweep.csv"
        code, out, _ = run_cli(
            capsys, "sweep-k", "--rho", 0.9, "--n", 100, "--grid", "0,100,1000", "--trials", 20, "--csv", table
        )
        assert code == 0
        assert len(json.loads(out)["reports"]) == 3
        with open(table, newline="") as f:
            rows = list(csv.DictReader(f))
        assert sorted({float(row["grid_value"]) for row in rows}) == [0.0, 100.0, 1000.0]

    def test_simulate_with_correlator(self, capsys):
        code, out, _ = run_cli(
            capsys, "simulate", "--rho", 0.8, "--n", 40, "--k", 200, "--trials", 20,
            "--methods", "MC,CV,CV_MCF", "--mcf", "ols", "--n-fit", 10,
        )
        assert code == 0
        report = json.loads(out)["reports"][0]
        assert [summary["method"] for summary in report["methods"]] == ["MC", "CV", "CV_MCF"]
        assert report["n_fit"] == 10

    def test_tolerance_violation_exits_nonzero(self, capsys):
        code, out, _ = run_cli(capsys, "simulate", "--rho", 0.5, "--n", 20, "--k", 20, "--trials", 10, "--max-rel-err", 0)
        assert code == 1
        assert json.loads(out)["max_rel_err"] > 0

    def test_sweep_fit(self, capsys):
        code, out, _ = run_cli(
            capsys, "sweep-fit", "--rho", 0.8, "--n", 50, "--k", 200, "--fractions", "0,0.2",
            "--trials", 10, "--mcf", "ols",
        )
        assert code == 0
        reports = json.loads(out)["reports"]
        assert [report["grid_value"] for report in reports] == [0.0, 0.2]
        assert reports[1]["n_fit"] == 10

    def test_bad_grid(self, capsys):
        code, _, err = run_cli(capsys, "sweep-k", "--n", 20, "--grid", "1,two", "--trials", 5)
        assert code == 1
        assert error_of(err)["error"] == "InvalidArgument"

    @pytest.mark.parametrize("flag, value", [("--trials", 0), ("--trials", 1), ("--workers", 0)])
    def test_explicit_zero_is_not_the_default(self, capsys, flag, value):
        arguments = ["simulate", "--rho", 0.5, "--n", 10, "--k", 10, "--trials", 5, flag, value]
        code, out, err = run_cli(capsys, *arguments)
        assert code == 1
        assert out == ""
        assert error_of(err)["error"] == "InvalidArgument"

    def test_extra_shift_builds_out_of_domain_population(self):
        args = cli.build_parser().parse_args(
            ["simulate", "--n", "20", "--mu-f", "1.0", "--extra-fit-size", "30", "--extra-shift", "2.5"]
        )
        run = cli.build_run_config(args, default_configuration())
        assert run.options["population"].mu_f == 1.0
        assert run.options["extra_population"].mu_f == 3.5
        assert run.options["extra_population"].rho == run.options["population"].rho
        assert cli._trial_mcf_options(run, 5).extra_population is run.options["extra_population"]

    def test_no_shift_keeps_extra_pairs_in_domain(self):
        args = cli.build_parser().parse_args(["sweep-fit", "--n", "20", "--fractions", "0.1"])
        assert cli.build_run_config(args, default_configuration()).options["extra_population"] is None

    def test_sweep_fit_with_out_of_domain_pairs(self, capsys):
        code, out, _ = run_cli(
            capsys, "sweep-fit", "--rho", 0.8, "--n", 40, "--k", 100, "--fractions", "0",
            "--trials", 5, "--mcf", "ols", "--extra-fit-size", 30, "--extra-shift", 1.0,
        )
        assert code == 0
        report = json.loads(out)["reports"][0]
        assert report["n_fit"] == 0
        assert "CV_MCF" in [summary["method"] for summary in report["methods"]]


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert run_cli(capsys, "bogus")[0] == 1

    def test_invariant_violation(self, capsys, monkeypatch):
        def broken(run):
            raise InvariantViolation("negative variance")
        monkeypatch.setattr(cli, "cmd_plan", broken)
        code, _, err = run_cli(capsys, "plan", "--n-r", 10, "--k", 10, "--rho", 0.5)
        assert code == 2
        assert error_of(err)["error"] == "InvariantViolation"

    def test_unexpected_failure(self, capsys, monkeypatch):
        def broken(run):
            raise RuntimeError("boom")
        monkeypatch.setattr(cli, "cmd_plan", broken)
        assert run_cli(capsys, "plan", "--n-r", 10, "--k", 10, "--rho", 0.5)[0] == 2


def test_nonlinear_fixture_has_features(nonlinear_files):
    paired_path, pool_path = nonlinear_files
    assert load_paired(paired_path).m == load_surrogate(pool_path).m == 1
    assert np.isfinite(load_paired(paired_path).f).all()
