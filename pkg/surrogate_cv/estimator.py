"""
Closed-form estimation with surrogate control variates.

Monte Carlo baseline, the control-variates estimator

    mu_CV = (1/n) sum_i (F_i - beta'G_i) + (1/k) sum_j beta'G'_j

its optimal coefficient, theoretical and plug-in variances, Chebyshev
intervals and the minimum-paired-sample planner. All functions are pure;
covariances use the unbiased (n - 1) divisor.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy import linalg

from .data_model import PairedDataset, SurrogateDataset, check_compatibility
from .errors import (
    DegenerateTarget,
    DimensionMismatch,
    EmptyDataset,
    EmptySurrogate,
    InvalidAlpha,
    InvalidArgument,
    InvalidDelta,
    SingularCovariance,
)

logger = logging.getLogger(__name__)

RIDGE_START = 1e-10
RIDGE_MAX = 1e-4


class EstimatorMethod(str, Enum):
    MC = "MC"
    CV = "CV"
    CV_MCF = "CV_MCF"


@dataclass(frozen=True, eq=False)
class MomentSummary:
    mean_f: float
    var_f: float
    mean_g: np.ndarray
    var_g: np.ndarray
    cov_gf: np.ndarray
    n: int

    @property
    def d(self) -> int:
        return self.mean_g.shape[0]


@dataclass(frozen=True, eq=False)
class Beta:
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if not np.all(np.isfinite(coeffs)):
            raise InvalidArgument("beta contains non-finite coefficients")
        coeffs.setflags(write=False)
        object.__setattr__(self, 'coeffs', coeffs)

    @classmethod
    def zeros(cls, d: int) -> "Beta":
        return cls(np.zeros(d))

    @property
    def d(self) -> int:
        return self.coeffs.shape[0]

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    radius: float
    failure_prob: float

    @property
    def lower(self) -> float:
        return self.center - self.radius

    @property
    def upper(self) -> float:
        return self.center + self.radius

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class IntervalSpec:
    """How to attach a Chebyshev interval: a failure probability delta, or a radius alpha."""
    delta: Optional[float] = 0.1
    alpha: Optional[float] = None

    def __post_init__(self):
        if (self.delta is None) == (self.alpha is None):
            raise InvalidArgument("specify exactly one of delta or alpha")

    @classmethod
    def with_alpha(cls, alpha: float) -> "IntervalSpec":
        return cls(delta=None, alpha=alpha)

    def interval(self, mu_hat: float, var_hat: float) -> ConfidenceInterval:
        if self.delta is not None:
            return chebyshev_interval(mu_hat, var_hat, self.delta)
        return ConfidenceInterval(mu_hat, float(self.alpha), chebyshev_tail(var_hat, self.alpha))


REPORT_KEYS = ('method', 'mu_hat', 'var_hat', 'beta', 'rho_sq', 'rho_sq_raw', 'n', 'k', 'n_fit', 'ci')


@dataclass(frozen=True)
class EstimateReport:
    method: EstimatorMethod
    mu_hat: float
    var_hat: float
    n_used: int
    k_used: int = 0
    beta: Optional[Beta] = None
    rho_sq: Optional[float] = None
    ci: Optional[ConfidenceInterval] = None
    rho_sq_raw: Optional[float] = None
    n_fit: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        """Serialise with the fixed key set REPORT_KEYS (null where not applicable)."""
        ci = None
        if self.ci is not None:
            ci = {'center': self.ci.center, 'radius': self.ci.radius, 'delta': self.ci.failure_prob}
        return {
            'method': self.method.value,
            'mu_hat': float(self.mu_hat),
            'var_hat': float(self.var_hat),
            'beta': None if self.beta is None else [float(b) for b in self.beta.coeffs],
            'rho_sq': None if self.rho_sq is None else float(self.rho_sq),
            'rho_sq_raw': None if self.rho_sq_raw is None else float(self.rho_sq_raw),
            'n': int(self.n_used),
            'k': int(self.k_used),
            'n_fit': None if self.n_fit is None else int(self.n_fit),
            'ci': ci,
        }


# --- Linear algebra ---

def solve_spd(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a symmetric positive semidefinite system by Cholesky.

    The plain factorisation is tried first. On failure a ridge of
    1e-10 * trace/d is added to the diagonal and grown tenfold up to
    1e-4 * trace/d before SingularCovariance is raised.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    dim = matrix.shape[0]
    if dim == 0:
        return np.zeros(0)

    try:
        return linalg.cho_solve(linalg.cho_factor(matrix), rhs)
    except (linalg.LinAlgError, ValueError):
        pass

    trace = float(np.trace(matrix))
    scale = trace / dim if trace > 0 else 1.0
    ridge = RIDGE_START
    while ridge <= RIDGE_MAX * (1 + 1e-9):
        try:
            factor = linalg.cho_factor(matrix + ridge * scale * np.eye(dim))
            if ridge > RIDGE_START:
                logger.warning(f"Covariance solve needed ridge {ridge:.0e} x trace/d")
            else:
                logger.debug(f"Covariance solve used ridge {ridge:.0e} x trace/d")
            return linalg.cho_solve(factor, rhs)
        except (linalg.LinAlgError, ValueError):
            ridge *= 10
    raise SingularCovariance(f"covariance of dimension {dim} is singular even with ridge {RIDGE_MAX:.0e} x trace/d")


# --- Estimators ---

def mc_estimate(f_values: Sequence[float]) -> EstimateReport:
    """Empirical mean of F; var_hat is the variance of the mean."""
    f = np.asarray(f_values, dtype=float).reshape(-1)
    n = f.shape[0]
    if n < 2:
        raise EmptyDataset(f"Monte Carlo estimate needs at least 2 samples, got {n}")
    return EstimateReport(
        method=EstimatorMethod.MC,
        mu_hat=float(np.mean(f)),
        var_hat=float(np.var(f, ddof=1) / n),
        n_used=n,
    )


def compute_moments(paired: PairedDataset) -> MomentSummary:
    """Sample moments of F and G over the paired set, with ddof=1 throughout."""
    if paired.n < 2:
        raise EmptyDataset(f"moments need at least 2 paired samples, got {paired.n}")
    joint = np.column_stack([paired.f, paired.g])
    cov = np.atleast_2d(np.cov(joint, rowvar=False, ddof=1))
    var_g = cov[1:, 1:]
    return MomentSummary(
        mean_f=float(np.mean(paired.f)),
        var_f=float(cov[0, 0]),
        mean_g=np.mean(paired.g, axis=0),
        var_g=(var_g + var_g.T) / 2,
        cov_gf=cov[1:, 0].copy(),
        n=paired.n,
    )


def beta_opt(moments: MomentSummary, k: int) -> Beta:
    """Plug-in optimal coefficient (k/(k+n)) Var(G)^-1 Cov(G, F)."""
    if moments.n < 2:
        raise EmptyDataset(f"beta needs at least 2 paired samples, got {moments.n}")
    if k < 0:
        raise InvalidArgument(f"k must be non-negative, got {k}")
    if k == 0:
        return Beta.zeros(moments.d)
    shrink = k / (k + moments.n)
    return Beta(shrink * solve_spd(moments.var_g, moments.cov_gf))


def _check_beta(beta: Beta, d: int) -> None:
    if beta.d != d:
        raise DimensionMismatch(f"beta has length {beta.d} but surrogates have d={d}")


def cv_estimate(paired: PairedDataset, surrogate: SurrogateDataset, beta: Beta) -> float:
    """Control-variates point estimate: mean(F - beta.G) over paired plus mean(beta.G) over the pool."""
    check_compatibility(paired, surrogate)
    _check_beta(beta, paired.d)
    if paired.n == 0:
        raise EmptyDataset("control-variates estimate needs paired samples")
    if beta.is_zero():
        return float(np.mean(paired.f))
    if surrogate.k == 0:
        raise EmptySurrogate("nonzero beta requires at least one surrogate-only sample")
    paired_term = np.mean(paired.f - paired.g @ beta.coeffs)
    surrogate_term = np.mean(surrogate.g @ beta.coeffs)
    return float(paired_term + surrogate_term)


def rho_squared(moments: MomentSummary) -> float:
    """Squared multiple correlation Cov(G,F)' Var(G)^-1 Cov(G,F) / Var(F), clamped to [0, 1]."""
    if moments.var_f <= 0:
        raise DegenerateTarget("target metric has zero sample variance")
    quadratic = float(moments.cov_gf @ solve_spd(moments.var_g, moments.cov_gf))
    return min(1.0, max(0.0, quadratic / moments.var_f))


def cv_variance_theoretical(var_f: float, rho_sq: float, n: int, k: int) -> float:
    """Closed-form CV variance (1/n)(1 - k/(k+n) rho^2) Var(F)."""
    if var_f < 0:
        raise InvalidArgument(f"var_f must be non-negative, got {var_f}")
    if not 0.0 <= rho_sq <= 1.0:
        raise InvalidArgument(f"rho_sq must lie in [0, 1], got {rho_sq}")
    if n < 1 or k < 0:
        raise InvalidArgument(f"need n >= 1 and k >= 0, got n={n}, k={k}")
    return (1.0 / n) * (1.0 - (k / (k + n)) * rho_sq) * var_f


def variance_quadratic(beta: Beta, moments: MomentSummary, n: int, k: int) -> float:
    """Variance of the CV estimator for a fixed beta under the given moments."""
    b = beta.coeffs
    quad = float(b @ moments.var_g @ b)
    paired_part = (moments.var_f - 2.0 * float(b @ moments.cov_gf) + quad) / n
    surrogate_part = quad / k if k > 0 else 0.0
    return paired_part + surrogate_part


def cv_variance_plugin(paired: PairedDataset, surrogate: SurrogateDataset, beta: Beta) -> float:
    """Plug-in variance: residual variance over n plus projected-pool variance over k."""
    check_compatibility(paired, surrogate)
    _check_beta(beta, paired.d)
    n = paired.n
    if n < 2:
        raise EmptyDataset(f"plug-in variance needs at least 2 paired samples, got {n}")
    if beta.is_zero():
        return float(np.var(paired.f, ddof=1) / n)

    residuals = paired.f - paired.g @ beta.coeffs
    paired_term = np.var(residuals, ddof=1) / n
    k = surrogate.k
    if k < 2:
        raise EmptySurrogate(f"nonzero beta requires at least 2 surrogate-only samples, got {k}")
    projected = surrogate.g @ beta.coeffs
    surrogate_term = np.var(projected, ddof=1) / k
    return float(paired_term + surrogate_term)


def chebyshev_interval(mu_hat: float, var_hat: float, delta: float) -> ConfidenceInterval:
    """Interval holding the true mean with probability at least 1 - delta."""
    if not 0.0 < delta < 1.0:
        raise InvalidDelta(f"delta must lie in (0, 1), got {delta}")
    if var_hat < 0:
        raise InvalidArgument(f"variance must be non-negative, got {var_hat}")
    return ConfidenceInterval(float(mu_hat), math.sqrt(var_hat / delta), float(delta))


def chebyshev_tail(var_hat: float, alpha: float) -> float:
    """Upper bound on P(|mu_hat - mu| >= alpha)."""
    if not alpha > 0:
        raise InvalidAlpha(f"alpha must be positive, got {alpha}")
    if var_hat < 0:
        raise InvalidArgument(f"variance must be non-negative, got {var_hat}")
    return min(1.0, var_hat / alpha ** 2)


def min_paired_samples(n_r: float, k: float, rho_sq: float) -> float:
    """Paired samples needed for a CV interval as tight as Monte Carlo with n_r samples.

    Real-valued; callers round up.
    """
    if n_r < 1 or k < 0:
        raise InvalidArgument(f"need n_r >= 1 and k >= 0, got n_r={n_r}, k={k}")
    if not 0.0 <= rho_sq <= 1.0:
        raise InvalidArgument(f"rho_sq must lie in [0, 1], got {rho_sq}")
    gap = k - n_r
    root = math.sqrt(gap * gap + 4.0 * n_r * k * (1.0 - rho_sq))
    return (-gap + root) / 2.0


# --- Pipelines ---

def run_cv_pipeline(
    paired: PairedDataset,
    surrogate: SurrogateDataset,
    interval: Optional[IntervalSpec] = None,
) -> EstimateReport:
    """Plug-in beta, CV estimate, plug-in variance and a Chebyshev interval."""
    interval = interval or IntervalSpec()
    check_compatibility(paired, surrogate)

    if surrogate.k == 0:
        report = mc_estimate(paired.f)
        return replace(report, ci=interval.interval(report.mu_hat, report.var_hat))

    moments = compute_moments(paired)
    beta = beta_opt(moments, surrogate.k)
    mu_hat = cv_estimate(paired, surrogate, beta)
    var_hat = cv_variance_plugin(paired, surrogate, beta)
    rho_sq = rho_squared(moments) if moments.var_f > 0 else 0.0

    logger.debug(f"CV estimate mu={mu_hat:.6g} var={var_hat:.6g} rho_sq={rho_sq:.4f} (n={paired.n}, k={surrogate.k})")
    return EstimateReport(
        method=EstimatorMethod.CV,
        mu_hat=mu_hat,
        var_hat=var_hat,
        n_used=paired.n,
        k_used=surrogate.k,
        beta=beta,
        rho_sq=rho_sq,
        ci=interval.interval(mu_hat, var_hat),
    )


def run_mc_pipeline(paired: PairedDataset, interval: Optional[IntervalSpec] = None) -> EstimateReport:
    """Plain Monte Carlo report over the paired F values alone."""
    interval = interval or IntervalSpec()
    report = mc_estimate(paired.f)
    return replace(report, ci=interval.interval(report.mu_hat, report.var_hat))


def select_estimate(cv: EstimateReport, cv_mcf: Optional[EstimateReport]) -> EstimateReport:
    """Prefer CV-MCF only when its variance is strictly smaller."""
    if cv_mcf is not None and cv_mcf.var_hat < cv.var_hat:
        return cv_mcf
    return cv
