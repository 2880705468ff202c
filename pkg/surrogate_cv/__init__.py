"""Control-variates estimation of expensive metrics from cheap surrogate measurements."""

from .data_model import (
    ColumnSchema,
    MetricKind,
    PairedDataset,
    PairedSample,
    SurrogateDataset,
    SurrogateSample,
    check_compatibility,
    load_paired,
    load_surrogate,
    write_paired,
    write_surrogate,
)
from .errors import InvariantViolation, SurrogateCVError
from .estimator import (
    Beta,
    ConfidenceInterval,
    EstimateReport,
    EstimatorMethod,
    IntervalSpec,
    MomentSummary,
    beta_opt,
    chebyshev_interval,
    chebyshev_tail,
    compute_moments,
    cv_estimate,
    cv_variance_plugin,
    cv_variance_theoretical,
    mc_estimate,
    min_paired_samples,
    rho_squared,
    run_cv_pipeline,
)
from .mcf import MCFConfig, MCFModel, SplitSpec, mcf_worthwhile, run_cv_mcf_pipeline, train_mcf
from .synthetic import GaussianPopulation, NonlinearPopulation, run_trials, sweep_fit_fraction, sweep_k

__version__ = "1.0.0"
