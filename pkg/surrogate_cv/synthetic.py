"""
Synthetic populations with known ground truth and a seeded trial harness.

Each trial draws a fresh paired set and surrogate pool from a population,
runs the requested estimators, and the harness compares the empirical
variance of every estimator across trials with its closed-form prediction.
Trial i uses a generator seeded from (master seed, i), so results do not
depend on execution order or worker count.
"""

import csv
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data_model import PairedDataset, SurrogateDataset
from .errors import InvalidArgument
from .estimator import (
    EstimatorMethod,
    IntervalSpec,
    cv_variance_theoretical,
    run_cv_pipeline,
    run_mc_pipeline,
    solve_spd,
)
from .mcf import (
    MCFConfig,
    MCFModel,
    SplitSpec,
    mcf_worthwhile,
    predict_batch,
    run_cv_mcf_pipeline,
    train_mcf,
)

logger = logging.getLogger(__name__)

# Reserved stream ids, far above any trial index
CHECK_STREAM = 2 ** 62
FIT_STREAM = 2 ** 62 + 1
EXTRA_FIT_STREAM = 2 ** 62 + 2

CHECK_SAMPLES = 100_000


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    """Generator for one trial, derived by hashing (master_seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


class Population(ABC):
    """A data-generating process for (F, G, phi) with known moments."""

    seed: int

    @property
    @abstractmethod
    def d(self) -> int: ...

    @property
    @abstractmethod
    def m(self) -> int: ...

    @property
    @abstractmethod
    def true_mean(self) -> float: ...

    @property
    @abstractmethod
    def target_variance(self) -> float: ...

    @property
    @abstractmethod
    def rho_sq(self) -> float:
        """Population squared correlation between F and the raw surrogates."""

    @abstractmethod
    def draw(self, rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (f, g, phi) arrays for count i.i.d. scenarios."""

    def sample(self, n: int, k: int, rng: Optional[np.random.Generator] = None) -> Tuple[PairedDataset, SurrogateDataset]:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        f, g, phi = self.draw(rng, n)
        _, g_pool, phi_pool = self.draw(rng, k)
        return PairedDataset(None, f, g, phi), SurrogateDataset(None, g_pool, phi_pool)


@dataclass(frozen=True, eq=False)
class GaussianPopulation(Population):
    """Jointly Gaussian (F, G).

    With a scalar rho, G has identity covariance and only G_1 correlates
    with F. A full (d+1)x(d+1) covariance (F first) overrides rho.
    """
    mu_f: float = 0.0
    var_f: float = 1.0
    d_surrogate: int = 1
    rho: float = 0.0
    covariance: Optional[np.ndarray] = None
    mu_g: Optional[Sequence[float]] = None
    seed: int = 0
    _factor: np.ndarray = field(init=False, repr=False)
    _mean: np.ndarray = field(init=False, repr=False)
    _rho_sq: float = field(init=False, repr=False)

    def __post_init__(self):
        d = self.d_surrogate
        if d < 1:
            raise InvalidArgument(f"surrogate dimension must be at least 1, got {d}")

        if self.covariance is None:
            if self.var_f <= 0:
                raise InvalidArgument(f"var_f must be positive, got {self.var_f}")
            if not -1.0 <= self.rho <= 1.0:
                raise InvalidArgument(f"rho must lie in [-1, 1], got {self.rho}")
            cov = np.eye(d + 1)
            cov[0, 0] = self.var_f
            cov[0, 1] = cov[1, 0] = self.rho * math.sqrt(self.var_f)
        else:
            cov = np.array(self.covariance, dtype=float)
            if cov.shape != (d + 1, d + 1):
                raise InvalidArgument(f"covariance must be {d + 1}x{d + 1}, got {cov.shape}")
            if not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
                raise InvalidArgument("covariance must be symmetric")
            if cov[0, 0] <= 0:
                raise InvalidArgument("Var(F) must be positive")

        eigenvalues, eigenvectors = np.linalg.eigh((cov + cov.T) / 2)
        if eigenvalues.min() < -1e-12 * max(1.0, eigenvalues.max()):
            raise InvalidArgument("covariance must be positive semidefinite")
        factor = eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))

        mu_g = np.zeros(d) if self.mu_g is None else np.asarray(self.mu_g, dtype=float).reshape(d)
        cov_gf = cov[1:, 0]
        rho_sq = float(cov_gf @ solve_spd(cov[1:, 1:], cov_gf) / cov[0, 0])

        object.__setattr__(self, 'covariance', cov)
        object.__setattr__(self, '_factor', factor)
        object.__setattr__(self, '_mean', np.concatenate([[self.mu_f], mu_g]))
        object.__setattr__(self, '_rho_sq', min(1.0, max(0.0, rho_sq)))

    @property
    def d(self) -> int:
        return self.d_surrogate

    @property
    def m(self) -> int:
        return 0

    @property
    def true_mean(self) -> float:
        return float(self.mu_f)

    @property
    def target_variance(self) -> float:
        return float(self.covariance[0, 0])

    @property
    def rho_sq(self) -> float:
        return self._rho_sq

    def draw(self, rng, count):
        joint = self._mean + rng.standard_normal((count, self.d + 1)) @ self._factor.T
        return joint[:, 0], joint[:, 1:], np.zeros((count, 0))


@dataclass(frozen=True, eq=False)
class NonlinearPopulation(Population):
    """Regime-switching population with near-zero raw correlation.

    X ~ U[-1, 1]^m, G = |X_1| + g_noise * eps, F = mu_f + sign(X_1) G + f_noise * eta.
    The sign of X_1 is independent of G, so corr(G, F) is zero, while
    sign(X_1) G is recoverable from (G, X).
    """
    m_features: int = 1
    mu_f: float = 1.0
    g_noise: float = 1.0
    f_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.m_features < 1:
            raise InvalidArgument(f"need at least one feature, got m={self.m_features}")
        if self.g_noise < 0 or self.f_noise < 0:
            raise InvalidArgument("noise scales must be non-negative")
        f, g, _ = self.draw(trial_rng(self.seed, CHECK_STREAM), CHECK_SAMPLES)
        raw_rho = float(np.corrcoef(f, g[:, 0])[0, 1])
        if abs(raw_rho) >= 0.2:
            raise InvalidArgument(f"raw correlation {raw_rho:.3f} is not below 0.2")
        logger.debug(f"Nonlinear population raw correlation {raw_rho:.4f}")

    @property
    def d(self) -> int:
        return 1

    @property
    def m(self) -> int:
        return self.m_features

    @property
    def true_mean(self) -> float:
        return float(self.mu_f)

    @property
    def target_variance(self) -> float:
        return 1.0 / 3.0 + self.g_noise ** 2 + self.f_noise ** 2

    @property
    def rho_sq(self) -> float:
        return 0.0

    def draw(self, rng, count):
        x = rng.uniform(-1.0, 1.0, size=(count, self.m_features))
        regime = np.where(x[:, 0] >= 0.0, 1.0, -1.0)
        g = np.abs(x[:, 0]) + self.g_noise * rng.standard_normal(count)
        f = self.mu_f + regime * g + self.f_noise * rng.standard_normal(count)
        return f, g.reshape(-1, 1), x


def sample_population(population: Population, n: int, k: int, seed: Optional[int] = None):
    """Draw n paired and k surrogate-only samples; deterministic per seed."""
    if n < 2 or k < 0:
        raise InvalidArgument(f"need n >= 2 and k >= 0, got n={n}, k={k}")
    rng = np.random.default_rng(population.seed if seed is None else seed)
    return population.sample(n, k, rng)


# --- Trial harness ---

@dataclass(frozen=True)
class MCFTrialOptions:
    """How the metric correlator is obtained inside trials.

    refit="once" trains a single model on an independent draw of n_fit
    pairs (plus extra_fit_size out-of-domain pairs) and conditions every
    trial on it; each trial still gives up n_fit paired samples.
    refit="per_trial" retrains inside every trial.
    """
    config: MCFConfig
    n_fit: int
    refit: str = "once"
    extra_fit_size: int = 0
    extra_population: Optional[Population] = None

    def __post_init__(self):
        if self.refit not in ("once", "per_trial"):
            raise InvalidArgument(f"refit must be 'once' or 'per_trial', got {self.refit}")
        if self.n_fit < 0 or self.extra_fit_size < 0:
            raise InvalidArgument("n_fit and extra_fit_size must be non-negative")


@dataclass(frozen=True)
class MethodSummary:
    method: EstimatorMethod
    emp_mean: float
    emp_var: float
    theory_var: float
    rel_err: float
    coverage: float
    bias_z: float
    mean_var_hat: float
    mean_rho_sq: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'method': self.method.value,
            'emp_mean': self.emp_mean,
            'emp_var': self.emp_var,
            'theory_var': self.theory_var,
            'rel_err': self.rel_err,
            'coverage': self.coverage,
            'bias_z': self.bias_z,
            'mean_var_hat': self.mean_var_hat,
            'mean_rho_sq': self.mean_rho_sq,
        }


@dataclass(frozen=True)
class TrialReport:
    n: int
    k: int
    trials: int
    true_mean: float
    methods: Dict[EstimatorMethod, MethodSummary]
    grid_value: Optional[float] = None
    n_fit: Optional[int] = None
    rho_sq_raw: Optional[float] = None
    rho_sq_mcf: Optional[float] = None
    mcf_worthwhile: Optional[bool] = None

    def __getitem__(self, method) -> MethodSummary:
        return self.methods[EstimatorMethod(method)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'grid_value': self.grid_value,
            'n': self.n,
            'k': self.k,
            'trials': self.trials,
            'true_mean': self.true_mean,
            'n_fit': self.n_fit,
            'rho_sq_raw': self.rho_sq_raw,
            'rho_sq_mcf': self.rho_sq_mcf,
            'mcf_worthwhile': self.mcf_worthwhile,
            'methods': [summary.to_dict() for summary in self.methods.values()],
        }

    def max_rel_err(self) -> float:
        return max(summary.rel_err for summary in self.methods.values())


@dataclass(frozen=True)
class _TrialTask:
    population: Population
    n: int
    k: int
    methods: Tuple[EstimatorMethod, ...]
    interval: IntervalSpec
    seed: int
    mcf: Optional[MCFTrialOptions] = None
    model: Optional[MCFModel] = None


def _draw_training_set(population: Population, options: MCFTrialOptions, seed: int) -> PairedDataset:
    parts = []
    if options.n_fit > 0:
        parts.append(population.sample(options.n_fit, 0, trial_rng(seed, FIT_STREAM))[0])
    if options.extra_fit_size > 0:
        source = options.extra_population or population
        parts.append(source.sample(options.extra_fit_size, 0, trial_rng(seed, EXTRA_FIT_STREAM))[0])
    training = parts[0]
    for part in parts[1:]:
        training = training.concat(part)
    return training


def _run_single_trial(task: _TrialTask, index: int) -> Dict[EstimatorMethod, Tuple[float, float, bool, float]]:
    rng = trial_rng(task.seed, index)
    paired, surrogate = task.population.sample(task.n, task.k, rng)
    truth = task.population.true_mean
    outcome = {}
    for method in task.methods:
        if method == EstimatorMethod.MC:
            report = run_mc_pipeline(paired, task.interval)
        elif method == EstimatorMethod.CV:
            report = run_cv_pipeline(paired, surrogate, task.interval)
        else:
            options = task.mcf
            split = SplitSpec(options.n_fit, seed=int(rng.integers(2 ** 63)))
            model = task.model
            extra = None
            if model is None and options.extra_fit_size > 0:
                source = options.extra_population or task.population
                extra = source.sample(options.extra_fit_size, 0, rng)[0]
            report = run_cv_mcf_pipeline(
                paired, surrogate, split, options.config, task.interval, extra_fit=extra, model=model
            )
        covered = report.ci.contains(truth) if report.ci is not None else False
        rho_sq = report.rho_sq if report.rho_sq is not None else float('nan')
        outcome[method] = (report.mu_hat, report.var_hat, covered, rho_sq)
    return outcome


def _population_mcf_rho_sq(population: Population, model: MCFModel, seed: int) -> float:
    f, g, phi = population.draw(trial_rng(seed, CHECK_STREAM), CHECK_SAMPLES)
    predictions = predict_batch(model, g, phi)
    if np.std(predictions) == 0:
        return 0.0
    return float(np.corrcoef(predictions, f)[0, 1] ** 2)


def run_trials(
    population: Population,
    n: int,
    k: int,
    trials: int,
    methods: Iterable = (EstimatorMethod.MC, EstimatorMethod.CV),
    mcf: Optional[MCFTrialOptions] = None,
    seed: Optional[int] = None,
    interval: Optional[IntervalSpec] = None,
    workers: int = 1,
    grid_value: Optional[float] = None,
) -> TrialReport:
    """Empirical mean and variance of each estimator over independent draws."""
    methods = tuple(dict.fromkeys(EstimatorMethod(m) for m in methods))
    if trials < 2:
        raise InvalidArgument(f"need at least 2 trials, got {trials}")
    if workers < 1:
        raise InvalidArgument(f"need at least 1 worker, got {workers}")
    if n < 2 or k < 0:
        raise InvalidArgument(f"need n >= 2 and k >= 0, got n={n}, k={k}")
    if EstimatorMethod.CV_MCF in methods:
        if mcf is None:
            raise InvalidArgument("CV_MCF trials need MCF options")
        if n - mcf.n_fit < 2:
            raise InvalidArgument(f"n_fit={mcf.n_fit} leaves fewer than 2 estimation samples out of n={n}")
        if mcf.n_fit + mcf.extra_fit_size == 0:
            raise InvalidArgument("CV_MCF trials need n_fit > 0 or out-of-domain training pairs")
    seed = population.seed if seed is None else seed
    interval = interval or IntervalSpec()

    model = None
    rho_sq_mcf_population = None
    if EstimatorMethod.CV_MCF in methods and mcf.refit == "once":
        training = _draw_training_set(population, mcf, seed)
        model, _ = train_mcf(training, mcf.config)
        rho_sq_mcf_population = _population_mcf_rho_sq(population, model, seed)

    task = _TrialTask(population, n, k, methods, interval, seed, mcf, model)
    worker = partial(_run_single_trial, task)
    logger.info(f"Running {trials} trials (n={n}, k={k}, methods={[m.value for m in methods]}, workers={workers})")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(worker, range(trials), chunksize=max(1, trials // (workers * 8))))
    else:
        outcomes = [worker(index) for index in range(trials)]

    var_f = population.target_variance
    truth = population.true_mean
    summaries = {}
    for method in methods:
        values = np.array([outcome[method] for outcome in outcomes], dtype=float)
        estimates, var_hats, covered, rho_sqs = values[:, 0], values[:, 1], values[:, 2], values[:, 3]
        emp_var = float(np.var(estimates, ddof=1))
        emp_mean = float(np.mean(estimates))

        if method == EstimatorMethod.MC:
            theory = var_f / n
        elif method == EstimatorMethod.CV:
            theory = cv_variance_theoretical(var_f, population.rho_sq, n, k)
        else:
            rho_sq_mcf = rho_sq_mcf_population
            if rho_sq_mcf is None:
                rho_sq_mcf = float(np.clip(np.nanmean(rho_sqs), 0.0, 1.0))
            theory = cv_variance_theoretical(var_f, rho_sq_mcf, n - mcf.n_fit, k)

        standard_error = math.sqrt(emp_var / trials)
        finite_rho = rho_sqs[np.isfinite(rho_sqs)]
        summaries[method] = MethodSummary(
            method=method,
            emp_mean=emp_mean,
            emp_var=emp_var,
            theory_var=theory,
            rel_err=abs(emp_var - theory) / theory if theory > 0 else abs(emp_var),
            coverage=float(np.mean(covered)),
            bias_z=abs(emp_mean - truth) / standard_error if standard_error > 0 else 0.0,
            mean_var_hat=float(np.mean(var_hats)),
            mean_rho_sq=float(np.mean(finite_rho)) if finite_rho.size else None,
        )

    report = TrialReport(n=n, k=k, trials=trials, true_mean=truth, methods=summaries, grid_value=grid_value)
    if EstimatorMethod.CV_MCF in methods:
        measured_mcf = rho_sq_mcf_population
        if measured_mcf is None:
            measured_mcf = summaries[EstimatorMethod.CV_MCF].mean_rho_sq or 0.0
        raw_summary = summaries.get(EstimatorMethod.CV)
        measured_raw = population.rho_sq
        if raw_summary is not None and raw_summary.mean_rho_sq is not None:
            measured_raw = raw_summary.mean_rho_sq
        report = replace(
            report,
            n_fit=mcf.n_fit,
            rho_sq_raw=measured_raw,
            rho_sq_mcf=measured_mcf,
            mcf_worthwhile=mcf_worthwhile(measured_mcf, measured_raw, n - mcf.n_fit, n, k),
        )
    for summary in summaries.values():
        logger.info(
            f"  {summary.method.value}: emp_var={summary.emp_var:.4g} theory={summary.theory_var:.4g} "
            f"rel_err={summary.rel_err:.3f} coverage={summary.coverage:.3f}"
        )
    return report


def sweep_k(population: Population, n: int, k_grid: Sequence[int], trials: int, **kwargs) -> List[TrialReport]:
    """One TrialReport per surrogate pool size."""
    if not k_grid:
        raise InvalidArgument("k grid must be non-empty")
    return [run_trials(population, n, int(k), trials, grid_value=float(k), **kwargs) for k in k_grid]


def sweep_fit_fraction(
    population: Population,
    n: int,
    k: int,
    fractions: Sequence[float],
    trials: int,
    config: MCFConfig,
    refit: str = "once",
    extra_fit_size: int = 0,
    extra_population: Optional[Population] = None,
    **kwargs,
) -> List[TrialReport]:
    """One TrialReport per fraction of paired samples spent on training the MCF."""
    if not fractions:
        raise InvalidArgument("fraction grid must be non-empty")
    reports = []
    for fraction in fractions:
        if not 0.0 <= fraction < 1.0:
            raise InvalidArgument(f"fit fractions must lie in [0, 1), got {fraction}")
        n_fit = int(round(fraction * n))
        methods = [EstimatorMethod.MC, EstimatorMethod.CV]
        options = None
        if n_fit + extra_fit_size > 0:
            methods.append(EstimatorMethod.CV_MCF)
            options = MCFTrialOptions(config, n_fit, refit, extra_fit_size, extra_population)
        else:
            logger.warning(f"Fraction {fraction}: no training data for the metric correlator, reporting MC and CV only")
        reports.append(run_trials(population, n, k, trials, methods=methods, mcf=options, grid_value=float(fraction), **kwargs))
    return reports


TRIAL_CSV_COLUMNS = ['grid_value', 'method', 'emp_var', 'theory_var', 'rel_err', 'M']


def write_trial_csv(reports: Sequence[TrialReport], path: str) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(TRIAL_CSV_COLUMNS)
        for report in reports:
            for summary in report.methods.values():
                writer.writerow([
                    '' if report.grid_value is None else repr(report.grid_value),
                    summary.method.value,
                    repr(summary.emp_var),
                    repr(summary.theory_var),
                    repr(summary.rel_err),
                    report.trials,
                ])
    logger.info(f"Trial table saved: {path}")


def trial_summary(reports: Sequence[TrialReport]) -> Dict[str, Any]:
    return {
        'reports': [report.to_dict() for report in reports],
        'max_rel_err': max(report.max_rel_err() for report in reports) if reports else None,
    }
