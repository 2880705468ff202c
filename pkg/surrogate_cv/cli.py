"""
Command-line surface for surrogate control-variates estimation.

Subcommands:
  estimate   MC, CV and CV-MCF reports for a paired file and an optional surrogate pool
  plan       minimum paired samples for a target Monte Carlo interval
  simulate   synthetic trials comparing empirical and theoretical variance
  sweep-k    trials over a grid of surrogate pool sizes
  sweep-fit  trials over a grid of MCF training fractions
  train-mcf  fit and save a metric correlator

Reports are JSON on stdout (or --out); logs go to stderr.
Exit codes: 0 success, 1 data or argument error, 2 internal error.
"""

import argparse
import json
import logging
import math
import sys
from functools import partial
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence

from .config import load_configuration
from .data_model import (
    ColumnSchema,
    MetricKind,
    PairedDataset,
    SurrogateDataset,
    check_compatibility,
    infer_metric_kind,
    load_paired,
    load_surrogate,
    validate_metric_kind,
)
from .errors import InsufficientData, InvalidArgument, InvariantViolation, SurrogateCVError
from .estimator import (
    EstimateReport,
    EstimatorMethod,
    IntervalSpec,
    min_paired_samples,
    run_cv_pipeline,
    run_mc_pipeline,
    select_estimate,
)
from .mcf import (
    MCFConfig,
    ModelKind,
    SplitSpec,
    holdout_correlation,
    load_model,
    mcf_worthwhile,
    predict_batch,
    run_cv_mcf_pipeline,
    save_model,
    split_paired,
    train_mcf,
)
from .synthetic import (
    GaussianPopulation,
    MCFTrialOptions,
    NonlinearPopulation,
    Population,
    run_trials,
    sweep_fit_fraction,
    sweep_k,
    trial_summary,
    write_trial_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


class _ArgumentParser(argparse.ArgumentParser):
    """Argument errors become InvalidArgument so they share exit code 1."""

    def error(self, message):
        raise InvalidArgument(message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: Optional[str] = None
    paired: Optional[str] = None
    surrogate: Optional[str] = None
    extra_fit: Optional[str] = None
    mcf_model: Optional[str] = None
    schema: ColumnSchema = field(default_factory=ColumnSchema)
    interval: IntervalSpec = field(default_factory=IntervalSpec)
    split: Optional[SplitSpec] = None
    mcf: Optional[MCFConfig] = None
    mcf_factory: Optional[Callable[[MetricKind], MCFConfig]] = None
    metric: str = "auto"
    select: str = "none"
    k_grid: List[int] = field(default_factory=list)
    fractions: List[float] = field(default_factory=list)
    options: Dict[str, Any] = field(default_factory=dict)


def _parse_list(text: Optional[str], cast: Callable, name: str) -> List:
    if text is None:
        return []
    try:
        values = [cast(item.strip()) for item in text.split(',') if item.strip()]
    except ValueError:
        raise InvalidArgument(f"--{name} must be a comma-separated list, got '{text}'")
    if not values:
        raise InvalidArgument(f"--{name} must not be empty")
    return values


def _add_interval_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument('--delta', type=float, help='Chebyshev failure probability (default from config, 0.1)')
    group.add_argument('--alpha', type=float, help='Deviation threshold; reports P(|mu_hat - mu| >= alpha) bound')


def _add_mcf_arguments(parser: argparse.ArgumentParser, model_flag: str) -> None:
    parser.add_argument(model_flag, choices=[kind.value for kind in ModelKind],
                        help='Metric correlator regressor')
    parser.add_argument('--n-fit', type=int, help='Paired samples used to train the metric correlator')
    parser.add_argument('--split', choices=['shuffled', 'prefix'], default='shuffled',
                        help='How the fit partition is chosen (default: shuffled)')
    parser.add_argument('--metric', choices=['auto', 'continuous', 'binary'], default='auto',
                        help='Target metric kind; binary uses logistic output and bce loss')
    parser.add_argument('--preset', choices=['default', 'three_layer', 'two_by_four'],
                        help='Hidden-layer layout preset')
    parser.add_argument('--hidden', help='Hidden layer widths as a comma list, e.g. 32,32')
    parser.add_argument('--epochs', type=int, help='Maximum training epochs')
    parser.add_argument('--learning-rate', type=float, help='Adam learning rate')
    parser.add_argument('--patience', type=int, help='Early stopping patience in epochs')
    parser.add_argument('--validation-fraction', type=float, help='Holdout fraction for early stopping')


def _add_population_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--population', choices=['gaussian', 'nonlinear'], default='gaussian',
                        help='Synthetic population (default: gaussian)')
    parser.add_argument('--rho', type=float, default=0.0, help='Gaussian correlation between F and G_1')
    parser.add_argument('--var-f', type=float, help='Gaussian Var(F)')
    parser.add_argument('--mu-f', type=float, help='Population mean of F')
    parser.add_argument('--d', type=int, help='Gaussian surrogate dimension')
    parser.add_argument('--n', type=int, required=True, help='Paired samples per trial')
    parser.add_argument('--trials', type=int, help='Number of independent trials M')
    parser.add_argument('--workers', type=int, help='Worker processes for trials')
    parser.add_argument('--csv', help='Write the trial table to this CSV file')
    parser.add_argument('--max-rel-err', type=float,
                        help='Exit 1 if any method deviates from theory by more than this relative error')
    parser.add_argument('--refit', choices=['once', 'per_trial'], help='Metric correlator training inside trials')
    parser.add_argument('--extra-fit-size', type=int, default=0,
                        help='Extra training pairs for the metric correlator, drawn from the population '
                             'shifted by --extra-shift (in-domain when the shift is 0)')
    parser.add_argument('--extra-shift', type=float, default=0.0,
                        help='Mean shift of the out-of-domain population for --extra-fit-size (default: 0)')
    _add_interval_arguments(parser)


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help='YAML configuration merged over the shipped defaults')
    common.add_argument('--seed', type=int, default=0, help='Master seed for all randomness (default: 0)')
    common.add_argument('--out', '-o', help='Output file (default: stdout)')

    parser = _ArgumentParser(
        description='Control-variates estimation of expensive metrics from cheap surrogates',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Monte Carlo and control-variates reports
  python3 cv_estimator.py estimate --paired paired.csv --surrogate pool.csv

  # Add a metric correlator trained on 50 paired samples
  python3 cv_estimator.py estimate --paired paired.csv --surrogate pool.csv --mcf ols --n-fit 50

  # Minimum paired samples to match 715 real samples with 1669 simulations at rho=0.79
  python3 cv_estimator.py plan --n-r 715 --k 1669 --rho 0.79

  # Validate the variance formula on a synthetic population
  python3 cv_estimator.py simulate --rho 0.9 --n 100 --k 900 --trials 10000
        """
    )
    commands = parser.add_subparsers(dest='command', required=True)

    estimate = commands.add_parser('estimate', parents=[common], help='Estimate the mean of F')
    estimate.add_argument('--paired', required=True, help='Paired samples (CSV or JSONL)')
    estimate.add_argument('--surrogate', help='Surrogate-only samples (CSV or JSONL)')
    estimate.add_argument('--extra-fit', help='Out-of-domain paired samples for training the metric correlator')
    estimate.add_argument('--mcf-model', help='Reuse a metric correlator written by train-mcf')
    estimate.add_argument('--select', choices=['none', 'auto'], default='none',
                          help='auto: also report the lower-variance of CV and CV-MCF')
    _add_interval_arguments(estimate)
    _add_mcf_arguments(estimate, '--mcf')

    plan = commands.add_parser('plan', parents=[common], help='Minimum paired samples (sample-efficiency planner)')
    plan.add_argument('--n-r', type=int, required=True, help='Real samples of the Monte Carlo baseline')
    plan.add_argument('--k', type=int, required=True, help='Surrogate-only samples')
    rho = plan.add_mutually_exclusive_group(required=True)
    rho.add_argument('--rho', type=float, help='Correlation coefficient')
    rho.add_argument('--rho-sq', type=float, help='Squared correlation')

    simulate = commands.add_parser('simulate', parents=[common], help='Synthetic variance trials')
    _add_population_arguments(simulate)
    simulate.add_argument('--k', type=int, default=0, help='Surrogate-only samples per trial')
    simulate.add_argument('--methods', default='MC,CV', help='Comma list of MC, CV, CV_MCF (default: MC,CV)')
    _add_mcf_arguments(simulate, '--mcf')

    sweep_k_parser = commands.add_parser('sweep-k', parents=[common], help='Trials over surrogate pool sizes')
    _add_population_arguments(sweep_k_parser)
    sweep_k_parser.add_argument('--grid', required=True, help='Comma list of k values')

    sweep_fit = commands.add_parser('sweep-fit', parents=[common], help='Trials over MCF training fractions')
    _add_population_arguments(sweep_fit)
    sweep_fit.add_argument('--k', type=int, default=0, help='Surrogate-only samples per trial')
    sweep_fit.add_argument('--fractions', required=True, help='Comma list of fit fractions in [0, 1)')
    _add_mcf_arguments(sweep_fit, '--mcf')

    train = commands.add_parser('train-mcf', parents=[common], help='Train and save a metric correlator')
    train.add_argument('--paired', required=True, help='Paired samples (CSV or JSONL)')
    train.add_argument('--extra-fit', help='Out-of-domain paired samples added to the training set')
    _add_mcf_arguments(train, '--model')

    return parser


def _interval_from_args(args: argparse.Namespace, config: Dict[str, Any]) -> IntervalSpec:
    if getattr(args, 'alpha', None) is not None:
        return IntervalSpec.with_alpha(args.alpha)
    delta = getattr(args, 'delta', None)
    if delta is None:
        delta = config.get('estimation', {}).get('delta', 0.1)
    return IntervalSpec(delta=delta)


def _mcf_from_args(args: argparse.Namespace, config: Dict[str, Any], model: Optional[str],
                   kind: MetricKind) -> MCFConfig:
    hidden = _parse_list(args.hidden, int, 'hidden') if args.hidden else None
    if args.preset and hidden is None:
        hidden = list(MCFConfig.preset(args.preset).hidden_layers)
    return MCFConfig.from_config(
        config,
        kind,
        model=model,
        hidden_layers=hidden,
        max_epochs=args.epochs,
        learning_rate=args.learning_rate,
        early_stop_patience=args.patience,
        validation_fraction=args.validation_fraction,
        seed=args.seed,
    )


def _metric_kind(metric: str, paired: Optional[PairedDataset]) -> MetricKind:
    if metric == 'auto':
        return infer_metric_kind(paired) if paired is not None else MetricKind.CONTINUOUS
    kind = MetricKind(metric)
    if paired is not None:
        validate_metric_kind(paired, kind)
    return kind


def build_run_config(args: argparse.Namespace, config: Dict[str, Any]) -> RunConfig:
    """Combine parsed flags with the configuration file; checks required inputs per command."""
    run = RunConfig(command=args.command, seed=args.seed, out=args.out)
    run.schema = ColumnSchema.from_config(config)

    if args.command in ('estimate', 'simulate', 'sweep-k', 'sweep-fit'):
        run.interval = _interval_from_args(args, config)

    if args.command in ('estimate', 'train-mcf'):
        run.paired = args.paired
        run.extra_fit = args.extra_fit
        run.metric = args.metric

    if args.command == 'estimate':
        run.surrogate = args.surrogate
        run.mcf_model = args.mcf_model
        run.select = args.select
        if args.mcf or args.mcf_model:
            run.split = SplitSpec(args.n_fit or 0, seed=args.seed, strategy=args.split)
            run.mcf_factory = partial(_mcf_from_args, args, config, args.mcf or 'ols')
        if args.n_fit is not None and not (args.mcf or args.mcf_model):
            raise InvalidArgument("--n-fit requires --mcf or --mcf-model")

    if args.command == 'train-mcf':
        if not args.out:
            raise InvalidArgument("train-mcf requires --out for the model file")
        run.mcf_factory = partial(_mcf_from_args, args, config, args.model)
        run.options['n_fit'] = args.n_fit
        run.options['strategy'] = args.split

    if args.command == 'plan':
        run.options.update(n_r=args.n_r, k=args.k, rho=args.rho, rho_sq=args.rho_sq)

    if args.command in ('simulate', 'sweep-k', 'sweep-fit'):
        synthetic = config.get('synthetic', {})
        run.options.update(
            trials=args.trials if args.trials is not None else synthetic.get('trials', 10000),
            workers=args.workers if args.workers is not None else synthetic.get('workers', 1),
            refit=args.refit or synthetic.get('refit', 'once'),
            n=args.n,
            csv=args.csv,
            max_rel_err=args.max_rel_err,
            extra_fit_size=args.extra_fit_size,
        )
        population = _population_from_args(args, config)
        run.options['population'] = population
        run.options['extra_population'] = None
        if args.extra_shift:
            run.options['extra_population'] = replace(population, mu_f=population.mu_f + args.extra_shift)
        if args.command == 'sweep-k':
            run.k_grid = _parse_list(args.grid, int, 'grid')
        else:
            run.options['k'] = args.k
        if args.command == 'sweep-fit':
            run.fractions = _parse_list(args.fractions, float, 'fractions')
        if args.command == 'simulate':
            run.options['methods'] = _parse_list(args.methods, EstimatorMethod, 'methods')
            run.options['n_fit'] = args.n_fit or 0
        if args.command in ('simulate', 'sweep-fit'):
            kind = MetricKind.CONTINUOUS if args.metric == 'auto' else MetricKind(args.metric)
            run.mcf = _mcf_from_args(args, config, args.mcf, kind)

    return run


def _population_from_args(args: argparse.Namespace, config: Dict[str, Any]) -> Population:
    synthetic = config.get('synthetic', {})
    if args.population == 'nonlinear':
        defaults = synthetic.get('nonlinear', {})
        return NonlinearPopulation(
            m_features=int(defaults.get('m', 1)),
            mu_f=args.mu_f if args.mu_f is not None else float(defaults.get('mu_f', 1.0)),
            g_noise=float(defaults.get('g_noise', 1.0)),
            f_noise=float(defaults.get('f_noise', 0.5)),
            seed=args.seed,
        )
    defaults = synthetic.get('gaussian', {})
    return GaussianPopulation(
        mu_f=args.mu_f if args.mu_f is not None else float(defaults.get('mu_f', 0.0)),
        var_f=args.var_f if args.var_f is not None else float(defaults.get('var_f', 1.0)),
        d_surrogate=args.d if args.d is not None else int(defaults.get('d', 1)),
        rho=args.rho,
        seed=args.seed,
    )


# --- Output ---

def emit(payload: Dict[str, Any], out: Optional[str]) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, 'w', encoding='utf-8') as f:
            f.write(text + "\n")
        logger.info(f"Report saved: {out}")
    else:
        print(text)


def _check_report(report: EstimateReport) -> None:
    if not report.var_hat >= 0:
        raise InvariantViolation(f"{report.method.value} variance is negative: {report.var_hat}")
    if report.rho_sq is not None and not 0.0 <= report.rho_sq <= 1.0:
        raise InvariantViolation(f"{report.method.value} rho_sq outside [0, 1]: {report.rho_sq}")


# --- Commands ---

def cmd_estimate(run: RunConfig) -> int:
    paired = load_paired(run.paired, run.schema)
    uses_mcf = run.split is not None
    surrogate = load_surrogate(run.surrogate, run.schema) if run.surrogate else None
    if surrogate is not None:
        check_compatibility(paired, surrogate, use_features=uses_mcf)

    reports = [run_mc_pipeline(paired, run.interval)]
    cv_report = None
    if surrogate is not None:
        cv_report = run_cv_pipeline(paired, surrogate, run.interval)
        reports.append(cv_report)

    mcf_report = None
    verdict = None
    if uses_mcf:
        pool = surrogate if surrogate is not None else SurrogateDataset.empty(paired.d, paired.m)
        extra = load_paired(run.extra_fit, run.schema) if run.extra_fit else None
        model = load_model(run.mcf_model) if run.mcf_model else None
        mcf_config = run.mcf_factory(_metric_kind(run.metric, paired))
        mcf_report = run_cv_mcf_pipeline(paired, pool, run.split, mcf_config, run.interval, extra_fit=extra, model=model)
        reports.append(mcf_report)
        verdict = mcf_worthwhile(mcf_report.rho_sq or 0.0, mcf_report.rho_sq_raw, mcf_report.n_used, paired.n, pool.k)

    for report in reports:
        _check_report(report)
        logger.info(f"{report.method.value}: mu_hat={report.mu_hat:.6g} var_hat={report.var_hat:.4g}")

    payload: Dict[str, Any] = {
        'reports': [report.to_dict() for report in reports],
        'mcf_worthwhile': verdict,
    }
    if run.select == 'auto':
        baseline = cv_report if cv_report is not None else reports[0]
        payload['selected'] = select_estimate(baseline, mcf_report).method.value
    emit(payload, run.out)
    return EXIT_OK


def cmd_plan(run: RunConfig) -> int:
    n_r, k = run.options['n_r'], run.options['k']
    if n_r < 1 or k < 0:
        raise InvalidArgument(f"need n_r >= 1 and k >= 0, got n_r={n_r}, k={k}")
    if run.options['rho'] is not None:
        rho = run.options['rho']
        if not -1.0 <= rho <= 1.0:
            raise InvalidArgument(f"rho must lie in [-1, 1], got {rho}")
        rho_sq = rho * rho
    else:
        rho_sq = run.options['rho_sq']
        if not 0.0 <= rho_sq <= 1.0:
            raise InvalidArgument(f"rho_sq must lie in [0, 1], got {rho_sq}")

    n_min = min_paired_samples(n_r, k, rho_sq)
    n_min_ceil = math.ceil(n_min - 1e-9)
    payload = {
        'n_r': n_r,
        'k': k,
        'rho_sq': rho_sq,
        'n_min': n_min,
        'n_min_ceil': n_min_ceil,
        'reduction': 1.0 - n_min_ceil / n_r,
    }
    logger.info(f"n_min={n_min:.2f} (ceil {n_min_ceil}), reduction {payload['reduction']:.1%}")
    emit(payload, run.out)
    return EXIT_OK


def _finish_trials(run: RunConfig, reports) -> int:
    if run.options.get('csv'):
        write_trial_csv(reports, run.options['csv'])
    summary = trial_summary(reports)
    emit(summary, run.out)

    limit = run.options.get('max_rel_err')
    if limit is not None and summary['max_rel_err'] is not None and summary['max_rel_err'] > limit:
        logger.error(f"Acceptance tolerance violated: max relative error {summary['max_rel_err']:.4f} > {limit}")
        return EXIT_USER_ERROR
    return EXIT_OK


def _trial_mcf_options(run: RunConfig, n_fit: int) -> MCFTrialOptions:
    return MCFTrialOptions(
        run.mcf, n_fit, run.options['refit'], run.options['extra_fit_size'], run.options['extra_population']
    )


def cmd_simulate(run: RunConfig) -> int:
    methods = run.options['methods']
    options = None
    if EstimatorMethod.CV_MCF in methods:
        options = _trial_mcf_options(run, run.options['n_fit'])
    report = run_trials(
        run.options['population'],
        run.options['n'],
        run.options['k'],
        run.options['trials'],
        methods=methods,
        mcf=options,
        seed=run.seed,
        interval=run.interval,
        workers=run.options['workers'],
    )
    return _finish_trials(run, [report])


def cmd_sweep_k(run: RunConfig) -> int:
    reports = sweep_k(
        run.options['population'],
        run.options['n'],
        run.k_grid,
        run.options['trials'],
        seed=run.seed,
        interval=run.interval,
        workers=run.options['workers'],
    )
    return _finish_trials(run, reports)


def cmd_sweep_fit(run: RunConfig) -> int:
    reports = sweep_fit_fraction(
        run.options['population'],
        run.options['n'],
        run.options['k'],
        run.fractions,
        run.options['trials'],
        run.mcf,
        refit=run.options['refit'],
        extra_fit_size=run.options['extra_fit_size'],
        extra_population=run.options['extra_population'],
        seed=run.seed,
        interval=run.interval,
        workers=run.options['workers'],
    )
    return _finish_trials(run, reports)


def cmd_train_mcf(run: RunConfig) -> int:
    paired = load_paired(run.paired, run.schema)
    kind = _metric_kind(run.metric, paired)
    mcf_config = run.mcf_factory(kind)

    n_fit = paired.n if run.options['n_fit'] is None else run.options['n_fit']
    fit, holdout = split_paired(paired, SplitSpec(n_fit, seed=run.seed, strategy=run.options['strategy']))
    training = fit
    if run.extra_fit:
        extra = load_paired(run.extra_fit, run.schema)
        training = extra if fit.n == 0 else fit.concat(extra)
    if training.n == 0:
        raise InsufficientData("no samples available to train the metric correlator")

    model, summary = train_mcf(training, mcf_config)
    save_model(model, run.out)

    if summary is not None:
        train_loss, val_loss = summary.train_loss, summary.val_loss
    else:
        residuals = predict_batch(model, training.g, training.phi) - training.f
        train_loss, val_loss = float((residuals ** 2).mean()), None
    metrics = {
        'model': run.out,
        'kind': model.kind.value,
        'n_train': training.n,
        'n_holdout': holdout.n,
        'train_loss': train_loss,
        'val_loss': val_loss,
        'holdout_pearson': holdout_correlation(model, holdout),
    }
    logger.info(f"Metric correlator metrics: {metrics}")
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        config = load_configuration(args.config)
        run = build_run_config(args, config)

        if run.command == 'estimate':
            return cmd_estimate(run)
        if run.command == 'plan':
            return cmd_plan(run)
        if run.command == 'simulate':
            return cmd_simulate(run)
        if run.command == 'sweep-k':
            return cmd_sweep_k(run)
        if run.command == 'sweep-fit':
            return cmd_sweep_fit(run)
        if run.command == 'train-mcf':
            return cmd_train_mcf(run)
        raise InvariantViolation(f"unhandled command {run.command}")
    except SurrogateCVError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}), file=sys.stderr)
        return EXIT_USER_ERROR
    except InvariantViolation as e:
        logger.critical(f"Internal invariant violated: {e}")
        print(json.dumps({'error': 'InvariantViolation', 'message': str(e)}), file=sys.stderr)
        return EXIT_INTERNAL_ERROR
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}), file=sys.stderr)
        return EXIT_INTERNAL_ERROR
