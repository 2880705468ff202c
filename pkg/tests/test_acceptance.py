"""End-to-end checks of the variance formula, the planner and the metric correlator regime.

These run many thousand synthetic trials; deselect with -m "not slow".
"""

import json
import math

import pytest

from surrogate_cv.cli import main
from surrogate_cv.estimator import EstimatorMethod, min_paired_samples
from surrogate_cv.mcf import MCFConfig
from surrogate_cv.synthetic import GaussianPopulation, NonlinearPopulation, run_trials, sweep_fit_fraction

pytestmark = pytest.mark.slow

RHOS = [0.0, 0.3, 0.6, 0.9]
POOL_RATIOS = [0, 1, 9]


@pytest.mark.parametrize("rho", RHOS)
@pytest.mark.parametrize("ratio", POOL_RATIOS)
def test_variance_formula_grid(rho, ratio):
    n = 100
    report = run_trials(GaussianPopulation(rho=rho), n, ratio * n, 20_000, seed=2024)
    for method in (EstimatorMethod.MC, EstimatorMethod.CV):
        summary = report[method]
        assert summary.rel_err < 0.05, summary
        assert summary.bias_z <= 4.0, summary


def test_chebyshev_coverage():
    report = run_trials(GaussianPopulation(rho=0.6), 50, 200, 10_000, seed=99)
    assert report["MC"].coverage >= 0.9
    assert report["CV"].coverage >= 0.9


def test_simulate_command_matches_theory(capsys):
    code = main(["simulate", "--rho", "0.9", "--n", "100", "--k", "900", "--trials", "10000", "--seed", "5"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_rel_err"] < 0.05


def test_planner_matches_monte_carlo_variance():
    n_r, k, rho = 715, 1669, 0.79
    n = math.ceil(min_paired_samples(n_r, k, rho * rho))
    population = GaussianPopulation(rho=rho)
    baseline = run_trials(population, n_r, 0, 5000, methods=["MC"], seed=11)["MC"].emp_var
    reduced = run_trials(population, n, k, 5000, methods=["CV"], seed=12)["CV"].emp_var
    assert reduced == pytest.approx(baseline, rel=0.10)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_control_variates_dominate_across_seeds(seed):
    report = run_trials(GaussianPopulation(rho=0.6), 100, 900, 2000, seed=seed)
    assert report["CV"].emp_var < report["MC"].emp_var


def test_metric_correlator_regime():
    config = MCFConfig(
        model="mlp",
        hidden_layers=(16, 16),
        learning_rate=0.01,
        max_epochs=500,
        early_stop_patience=50,
        seed=0,
    )
    reports = sweep_fit_fraction(
        NonlinearPopulation(seed=8), 2000, 20_000, [0.1, 0.3], 5000, config, refit="once", seed=8
    )
    passing = [
        report for report in reports
        if math.sqrt(report.rho_sq_mcf) > 0.6
        and report.mcf_worthwhile
        and report["CV_MCF"].emp_var < 0.95 * report["CV"].emp_var
    ]
    assert passing, [report.to_dict() for report in reports]
