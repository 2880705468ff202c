"""
Metric correlator functions (MCF).

An MCF is a regressor f_hat: (G, phi) -> F trained on paired samples. The
CV-MCF pipeline splits the paired data into fit and estimation partitions,
trains f_hat on the fit partition (optionally augmented with out-of-domain
pairs), replaces every surrogate vector by the scalar prediction, and runs
the control-variates pipeline on the estimation partition.

Two regressors are provided: ordinary least squares, and a ReLU multilayer
perceptron trained with Adam and early stopping on a validation holdout.
Inputs are standardised per column on the fit set and the standardisation
is stored in the model.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data_model import (
    MetricKind,
    PairedDataset,
    SurrogateDataset,
    check_compatibility,
)
from .errors import (
    DimensionMismatch,
    InsufficientData,
    InvalidArgument,
    InvalidSplit,
    ParseError,
)
from .estimator import (
    EstimateReport,
    EstimatorMethod,
    IntervalSpec,
    compute_moments,
    rho_squared,
    run_cv_pipeline,
    solve_spd,
)

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    OLS = "ols"
    MLP = "mlp"


class OutputActivation(str, Enum):
    IDENTITY = "identity"
    LOGISTIC = "logistic"


class LossKind(str, Enum):
    MSE = "mse"
    BCE = "bce"


class SplitStrategy(str, Enum):
    SHUFFLED = "shuffled"
    PREFIX = "prefix"


@dataclass(frozen=True)
class SplitSpec:
    n_fit: int
    seed: int = 0
    strategy: SplitStrategy = SplitStrategy.SHUFFLED

    def __post_init__(self):
        object.__setattr__(self, 'strategy', SplitStrategy(self.strategy))


# Hidden-layer layouts used for the driving and locomotion experiments
PRESET_LAYOUTS = {
    "default": (32, 32),
    "three_layer": (32, 32, 32),
    "two_by_four": (4, 4),
}


@dataclass(frozen=True)
class MCFConfig:
    model: ModelKind = ModelKind.MLP
    hidden_layers: Tuple[int, ...] = (32, 32)
    output_activation: OutputActivation = OutputActivation.IDENTITY
    loss: LossKind = LossKind.MSE
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    early_stop_patience: int = 50
    validation_fraction: float = 0.2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'model', ModelKind(self.model))
        object.__setattr__(self, 'output_activation', OutputActivation(self.output_activation))
        object.__setattr__(self, 'loss', LossKind(self.loss))
        object.__setattr__(self, 'hidden_layers', tuple(int(w) for w in self.hidden_layers))

        if (self.loss == LossKind.BCE) != (self.output_activation == OutputActivation.LOGISTIC):
            raise InvalidArgument("bce loss requires logistic output and vice versa")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise InvalidArgument(f"validation_fraction must lie in [0, 0.5], got {self.validation_fraction}")
        if any(w < 1 for w in self.hidden_layers):
            raise InvalidArgument(f"hidden layer widths must be positive, got {self.hidden_layers}")
        if self.learning_rate <= 0:
            raise InvalidArgument(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise InvalidArgument("max_epochs, early_stop_patience and batch_size must be at least 1")

    @property
    def activation(self) -> str:
        return "relu"

    @property
    def metric_kind(self) -> MetricKind:
        return MetricKind.BINARY if self.loss == LossKind.BCE else MetricKind.CONTINUOUS

    @classmethod
    def for_metric(cls, kind: MetricKind, **overrides) -> "MCFConfig":
        """Config with output activation and loss matched to the metric kind."""
        if MetricKind(kind) == MetricKind.BINARY:
            overrides.update(output_activation=OutputActivation.LOGISTIC, loss=LossKind.BCE)
        else:
            overrides.update(output_activation=OutputActivation.IDENTITY, loss=LossKind.MSE)
        return cls(**overrides)

    @classmethod
    def preset(cls, name: str, kind: MetricKind = MetricKind.CONTINUOUS, **overrides) -> "MCFConfig":
        if name not in PRESET_LAYOUTS:
            raise InvalidArgument(f"unknown MCF preset '{name}' (choose from {', '.join(PRESET_LAYOUTS)})")
        return cls.for_metric(kind, hidden_layers=PRESET_LAYOUTS[name], **overrides)

    @classmethod
    def from_config(cls, config: Dict[str, Any], kind: MetricKind = MetricKind.CONTINUOUS, **overrides) -> "MCFConfig":
        values = dict(config.get('mcf', {}) or {})
        values.update({key: value for key, value in overrides.items() if value is not None})
        known = set(cls.__dataclass_fields__) - {'output_activation', 'loss'}
        unknown = set(values) - known
        if unknown:
            raise InvalidArgument(f"unknown mcf settings: {', '.join(sorted(unknown))}")
        return cls.for_metric(kind, **values)


@dataclass(frozen=True, eq=False)
class MCFModel:
    kind: ModelKind
    d: int
    m: int
    parameters: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    hidden_layers: Tuple[int, ...] = ()
    output_activation: OutputActivation = OutputActivation.IDENTITY
    target_mean: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', ModelKind(self.kind))
        object.__setattr__(self, 'output_activation', OutputActivation(self.output_activation))
        object.__setattr__(self, 'hidden_layers', tuple(int(w) for w in self.hidden_layers))
        for name in ('parameters', 'input_mean', 'input_scale'):
            array = np.array(getattr(self, name), dtype=float).reshape(-1)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if self.input_mean.shape[0] != self.input_dim or self.input_scale.shape[0] != self.input_dim:
            raise DimensionMismatch(f"standardisation vectors must have length {self.input_dim}")
        if self.parameters.shape[0] != parameter_count(self.layer_sizes):
            raise DimensionMismatch(
                f"expected {parameter_count(self.layer_sizes)} parameters, got {self.parameters.shape[0]}"
            )

    @property
    def input_dim(self) -> int:
        return self.d + self.m

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        if self.kind == ModelKind.OLS:
            return (self.input_dim, 1)
        return (self.input_dim, *self.hidden_layers, 1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'd': self.d,
            'm': self.m,
            'input_dim': self.input_dim,
            'hidden_layers': list(self.hidden_layers),
            'output_activation': self.output_activation.value,
            'input_mean': self.input_mean.tolist(),
            'input_scale': self.input_scale.tolist(),
            'target_mean': float(self.target_mean),
            'target_scale': float(self.target_scale),
            'parameters': self.parameters.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MCFModel":
        try:
            return cls(
                kind=data['kind'],
                d=int(data['d']),
                m=int(data['m']),
                parameters=data['parameters'],
                input_mean=data['input_mean'],
                input_scale=data['input_scale'],
                hidden_layers=data.get('hidden_layers', []),
                output_activation=data.get('output_activation', 'identity'),
                target_mean=float(data.get('target_mean', 0.0)),
                target_scale=float(data.get('target_scale', 1.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidArgument(f"invalid MCF model description: {e}")


@dataclass(frozen=True)
class TrainingSummary:
    epochs_run: int
    best_epoch: int
    train_loss: float
    val_loss: Optional[float]
    history: Tuple[float, ...] = field(default_factory=tuple)


# --- Splitting ---

def split_paired(paired: PairedDataset, spec: SplitSpec) -> Tuple[PairedDataset, PairedDataset]:
    """Partition paired samples into disjoint fit and estimation sets."""
    n = paired.n
    if not 0 <= spec.n_fit <= n:
        raise InvalidSplit(f"n_fit must lie in [0, {n}], got {spec.n_fit}")
    if spec.strategy == SplitStrategy.PREFIX:
        order = np.arange(n)
    else:
        order = np.random.default_rng(spec.seed).permutation(n)
    fit_idx = np.sort(order[:spec.n_fit])
    est_idx = np.sort(order[spec.n_fit:])
    return paired.subset(fit_idx), paired.subset(est_idx)


# --- Design matrices ---

def _inputs(g: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Design matrix [G | PHI]."""
    return np.hstack([g, phi])


def _standardisation(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column mean and scale; constant columns keep scale 1."""
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


# --- Ordinary least squares ---

def fit_ols(fit: PairedDataset) -> MCFModel:
    """Least-squares fit of F on standardised [G, phi] plus an intercept."""
    p = fit.d + fit.m
    if fit.n < p + 1:
        raise InsufficientData(f"OLS with {p} inputs needs at least {p + 1} samples, got {fit.n}")
    x_raw = _inputs(fit.g, fit.phi)
    mean, scale = _standardisation(x_raw)
    design = np.column_stack([(x_raw - mean) / scale, np.ones(fit.n)])
    coef = solve_spd(design.T @ design, design.T @ fit.f)
    logger.info(f"Fitted OLS metric correlator on {fit.n} samples ({p} inputs)")
    return MCFModel(ModelKind.OLS, fit.d, fit.m, coef, mean, scale)


def ols_coefficients(model: MCFModel) -> Tuple[np.ndarray, float]:
    """Slopes and intercept of an OLS model in the original input units."""
    if model.kind != ModelKind.OLS:
        raise InvalidArgument("ols_coefficients requires an OLS model")
    weights = model.parameters[:-1]
    slopes = weights / model.input_scale
    intercept = float(model.parameters[-1] - np.sum(weights * model.input_mean / model.input_scale))
    return slopes, intercept


# --- Multilayer perceptron ---

def parameter_count(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _unpack(params: np.ndarray, layer_sizes: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((weights, bias))
    return layers


def _init_parameters(layer_sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    chunks = []
    last = len(layer_sizes) - 2
    for index, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        gain = 1.0 if index == last else 2.0
        chunks.append(rng.normal(0.0, math.sqrt(gain / fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _forward(params: np.ndarray, layer_sizes: Sequence[int], x: np.ndarray):
    layers = _unpack(params, layer_sizes)
    activations = [x]
    pre_activations = []
    a = x
    for weights, bias in layers[:-1]:
        z = a @ weights + bias
        pre_activations.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    weights, bias = layers[-1]
    out = (a @ weights + bias)[:, 0]
    return layers, activations, pre_activations, out


def mlp_loss_and_gradient(
    params: np.ndarray,
    layer_sizes: Sequence[int],
    x: np.ndarray,
    t: np.ndarray,
    output_activation: OutputActivation = OutputActivation.IDENTITY,
) -> Tuple[float, np.ndarray]:
    """Mean loss (MSE for identity output, BCE on logits for logistic) and its gradient."""
    layers, activations, pre_activations, z = _forward(params, layer_sizes, x)
    count = x.shape[0]
    if OutputActivation(output_activation) == OutputActivation.LOGISTIC:
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        dz = (expit(z) - t) / count
    else:
        residual = z - t
        loss = float(np.mean(residual ** 2))
        dz = 2.0 * residual / count

    grads = []
    delta = dz[:, None]
    for index in range(len(layers) - 1, -1, -1):
        weights, _ = layers[index]
        grads.append(delta.sum(axis=0))
        grads.append((activations[index].T @ delta).reshape(-1))
        if index > 0:
            delta = (delta @ weights.T) * (pre_activations[index - 1] > 0)
    grads.reverse()
    return loss, np.concatenate(grads)


def _mlp_loss(params, layer_sizes, x, t, output_activation) -> float:
    return mlp_loss_and_gradient(params, layer_sizes, x, t, output_activation)[0]


def train_mlp(fit: PairedDataset, config: MCFConfig) -> Tuple[MCFModel, TrainingSummary]:
    """Train an MLP with Adam; returns the checkpoint with the lowest monitored loss."""
    if fit.n < 2:
        raise InsufficientData(f"MLP training needs at least 2 samples, got {fit.n}")

    x_raw = _inputs(fit.g, fit.phi)
    mean, scale = _standardisation(x_raw)
    x = (x_raw - mean) / scale

    if config.loss == LossKind.BCE:
        if np.any((fit.f < 0) | (fit.f > 1)):
            raise InvalidArgument("bce loss requires targets in [0, 1]")
        target_mean, target_scale = 0.0, 1.0
    else:
        target_mean = float(np.mean(fit.f))
        target_scale = float(np.std(fit.f)) or 1.0
    t = (fit.f - target_mean) / target_scale

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(fit.n)
    n_val = int(math.floor(config.validation_fraction * fit.n))
    if n_val >= 1 and fit.n - n_val >= 1:
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        val_idx, train_idx = None, order

    layer_sizes = (x.shape[1], *config.hidden_layers, 1)
    params = _init_parameters(layer_sizes, rng)
    first_moment = np.zeros_like(params)
    second_moment = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    monitor_x = x[val_idx] if val_idx is not None else x[train_idx]
    monitor_t = t[val_idx] if val_idx is not None else t[train_idx]
    best_params = params.copy()
    best_loss = _mlp_loss(params, layer_sizes, monitor_x, monitor_t, config.output_activation)
    best_epoch = 0
    history: List[float] = []
    wait = 0
    epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        shuffled = rng.permutation(train_idx)
        for start in range(0, len(shuffled), config.batch_size):
            batch = shuffled[start:start + config.batch_size]
            _, grad = mlp_loss_and_gradient(params, layer_sizes, x[batch], t[batch], config.output_activation)
            step += 1
            first_moment = beta1 * first_moment + (1 - beta1) * grad
            second_moment = beta2 * second_moment + (1 - beta2) * grad * grad
            m_hat = first_moment / (1 - beta1 ** step)
            v_hat = second_moment / (1 - beta2 ** step)
            params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

        monitored = _mlp_loss(params, layer_sizes, monitor_x, monitor_t, config.output_activation)
        history.append(monitored)
        if monitored < best_loss:
            best_loss = monitored
            best_params = params.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                logger.debug(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                break

    train_loss = _mlp_loss(best_params, layer_sizes, x[train_idx], t[train_idx], config.output_activation)
    val_loss = best_loss if val_idx is not None else None
    summary = TrainingSummary(
        epochs_run=epoch,
        best_epoch=best_epoch,
        train_loss=train_loss,
        val_loss=val_loss,
        history=tuple(history),
    )
    model = MCFModel(
        kind=ModelKind.MLP,
        d=fit.d,
        m=fit.m,
        parameters=best_params,
        input_mean=mean,
        input_scale=scale,
        hidden_layers=config.hidden_layers,
        output_activation=config.output_activation,
        target_mean=target_mean,
        target_scale=target_scale,
    )
    logger.info(
        f"Trained MLP metric correlator on {fit.n} samples: {epoch} epochs, best epoch {best_epoch}, "
        f"train loss {train_loss:.4g}" + (f", val loss {val_loss:.4g}" if val_loss is not None else "")
    )
    return model, summary


def fit_mlp(fit: PairedDataset, config: MCFConfig) -> MCFModel:
    """Train an MLP correlator and drop the training summary."""
    return train_mlp(fit, config)[0]


def train_mcf(fit: PairedDataset, config: MCFConfig) -> Tuple[MCFModel, Optional[TrainingSummary]]:
    """Train the regressor named by config.model."""
    if config.model == ModelKind.OLS:
        return fit_ols(fit), None
    return train_mlp(fit, config)


# --- Prediction ---

def predict_batch(model: MCFModel, g: np.ndarray, phi: Optional[np.ndarray] = None) -> np.ndarray:
    """Evaluate the correlator row-wise; a missing phi means m = 0."""
    g = np.atleast_2d(np.asarray(g, dtype=float))
    rows = g.shape[0]
    phi = np.zeros((rows, 0)) if phi is None else np.asarray(phi, dtype=float).reshape(rows, -1)
    if g.shape[1] != model.d or phi.shape[1] != model.m:
        raise DimensionMismatch(
            f"model expects (d, m)=({model.d}, {model.m}), got ({g.shape[1]}, {phi.shape[1]})"
        )
    x = (_inputs(g, phi) - model.input_mean) / model.input_scale
    if model.kind == ModelKind.OLS:
        return x @ model.parameters[:-1] + model.parameters[-1]
    _, _, _, z = _forward(model.parameters, model.layer_sizes, x)
    if model.output_activation == OutputActivation.LOGISTIC:
        return expit(z)
    return z * model.target_scale + model.target_mean


def predict(model: MCFModel, g: Sequence[float], phi: Optional[Sequence[float]] = None) -> float:
    g = np.asarray(g, dtype=float).reshape(-1)
    phi = np.zeros(0) if phi is None else np.asarray(phi, dtype=float).reshape(-1)
    if g.shape[0] != model.d or phi.shape[0] != model.m:
        raise DimensionMismatch(
            f"model expects (d, m)=({model.d}, {model.m}), got ({g.shape[0]}, {phi.shape[0]})"
        )
    return float(predict_batch(model, g.reshape(1, -1), phi.reshape(1, -1))[0])


def transform_paired(model: MCFModel, paired: PairedDataset) -> PairedDataset:
    """Replace G by the scalar prediction; features are consumed."""
    predictions = predict_batch(model, paired.g, paired.phi) if paired.n else np.zeros(0)
    return PairedDataset(paired.scenario_ids, paired.f, predictions.reshape(-1, 1), np.zeros((paired.n, 0)))


def transform_surrogate(model: MCFModel, surrogate: SurrogateDataset) -> SurrogateDataset:
    predictions = predict_batch(model, surrogate.g, surrogate.phi) if surrogate.k else np.zeros(0)
    return SurrogateDataset(surrogate.scenario_ids, predictions.reshape(-1, 1), np.zeros((surrogate.k, 0)))


def holdout_correlation(model: MCFModel, dataset: PairedDataset) -> Optional[float]:
    """Pearson correlation between predictions and F, or None when undefined."""
    if dataset.n < 2:
        return None
    predictions = predict_batch(model, dataset.g, dataset.phi)
    if np.std(predictions) == 0 or np.std(dataset.f) == 0:
        return None
    return float(np.corrcoef(predictions, dataset.f)[0, 1])


# --- Decision rule and pipeline ---

def mcf_worthwhile(rho_sq_mcf: float, rho_sq_raw: float, n_est: int, n: int, k: int) -> bool:
    """True iff the MCF gain in correlation outweighs the paired samples it consumes."""
    if k <= 0:
        return False
    return rho_sq_mcf / (1.0 + n_est / k) > rho_sq_raw / (1.0 + n / k)


def raw_rho_squared(paired: PairedDataset) -> float:
    moments = compute_moments(paired)
    return rho_squared(moments) if moments.var_f > 0 else 0.0


def run_cv_mcf_pipeline(
    paired: PairedDataset,
    surrogate: SurrogateDataset,
    split: SplitSpec,
    config: MCFConfig,
    interval: Optional[IntervalSpec] = None,
    extra_fit: Optional[PairedDataset] = None,
    model: Optional[MCFModel] = None,
) -> EstimateReport:
    """Train (or reuse) an MCF, map G to its prediction and run the CV pipeline on the est partition."""
    check_compatibility(paired, surrogate, use_features=True)
    fit, est = split_paired(paired, split)
    if est.n < 2:
        raise InvalidSplit(f"estimation partition needs at least 2 samples, got {est.n}")

    if model is None:
        training = fit
        if extra_fit is not None:
            training = extra_fit if fit.n == 0 else fit.concat(extra_fit)
        if training.n == 0:
            raise InsufficientData("no samples available to train the metric correlator")
        model, _ = train_mcf(training, config)
    elif model.d != paired.d or model.m != paired.m:
        raise DimensionMismatch(
            f"model expects (d, m)=({model.d}, {model.m}), data has ({paired.d}, {paired.m})"
        )

    report = run_cv_pipeline(transform_paired(model, est), transform_surrogate(model, surrogate), interval)
    rho_sq_raw = raw_rho_squared(paired)
    logger.info(
        f"CV-MCF on n_est={est.n} (n_fit={fit.n}, k={surrogate.k}): "
        f"rho_sq raw={rho_sq_raw:.4f} -> mcf={report.rho_sq if report.rho_sq is not None else float('nan'):.4f}"
    )
    return replace(report, method=EstimatorMethod.CV_MCF, rho_sq_raw=rho_sq_raw, n_fit=fit.n)


# --- Persistence ---

def save_model(model: MCFModel, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Saved {model.kind.value} metric correlator to {path}")


def load_model(path: str) -> MCFModel:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise InvalidArgument(f"model file '{path}' not found")
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in model file {path}: {e.msg}", e.lineno)
    return MCFModel.from_dict(data)
