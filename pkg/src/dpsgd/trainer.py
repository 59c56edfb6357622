"""DP-SGD training loop, EMA parameter averaging and hyper-parameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from dpsgd import accountant
from dpsgd.accountant import PrivacyBudget
from dpsgd.data import AugmentSpec, Dataset, epoch_batches, sample_multiplicity
from dpsgd.errors import CalibrationError, ConfigurationError, DomainError, ShapeError
from dpsgd.nn import models
from dpsgd.nn.models import ModelParams, ModelSpec
from dpsgd.privatizer import (
    NoiseKey,
    PrivatizationConfig,
    contribution_from_augmentations,
    privatize_step,
    to_geometry,
)
from dpsgd.rng import derive_seed, substream

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epsilon", "train_acc", "eval_acc", "loss", "ema_eval_acc")


# --- EMA ---------------------------------------------------------------------


def ema_decay(t, decay_rate: float):
    """Warm-up decay ``min(decay_rate, (1 + t) / (10 + t))``; ``t`` may be an array."""
    return np.minimum(decay_rate, (1.0 + np.asarray(t, dtype=np.float64)) / (10.0 + np.asarray(t)))


@dataclass(frozen=True)
class EmaState:
    average: np.ndarray
    decay_rate: float = 0.9999
    step: int = 0

    def __post_init__(self):
        if not 0 < self.decay_rate < 1:
            raise ConfigurationError("EMA decay_rate must lie in (0, 1)")

    @classmethod
    def start(cls, params: ModelParams, decay_rate: float = 0.9999) -> "EmaState":
        return cls(np.array(params.vector), decay_rate, 0)

    @property
    def effective_decay(self) -> float:
        return float(ema_decay(self.step, self.decay_rate))


def ema_update(state: EmaState, params) -> EmaState:
    vector = params.vector if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)
    if vector.shape != state.average.shape:
        raise ShapeError(f"EMA holds {state.average.shape} parameters, got {vector.shape}")
    d = state.effective_decay
    return EmaState(d * state.average + (1 - d) * vector, state.decay_rate, state.step + 1)


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    privatization: PrivatizationConfig
    steps: int
    budget: Optional[PrivacyBudget] = None
    eval_cadence: int = 0
    seed: int = 0
    ema_decay: float = 0.9999
    augment: Optional[AugmentSpec] = None
    conversion: str = "improved"

    def __post_init__(self):
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError(f"learning_rate must be finite and > 0, got {self.learning_rate}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigurationError(f"steps must be a non-negative integer, got {self.steps}")
        if self.eval_cadence < 0:
            raise ConfigurationError("eval_cadence must be >= 0")
        if self.privatization.noise_multiplier > 0 and self.budget is None:
            raise ConfigurationError("a privacy budget is required when noise_multiplier > 0")

    def sampling_ratio(self, n: int) -> float:
        return self.privatization.total_batch / n

    def epsilon_after(self, steps: int, n: int) -> float:
        """Epsilon spent after ``steps`` steps on ``n`` examples (inf without noise)."""
        if steps == 0:
            return 0.0
        if self.privatization.noise_multiplier == 0:
            return math.inf
        spec = accountant.SamplingSpec(self.sampling_ratio(n), self.privatization.noise_multiplier, steps)
        return accountant.epsilon_of(spec, self.budget.delta, conversion=self.conversion)[0]

    def check_budget(self, n: int) -> float:
        """Raises ConfigurationError unless the full run fits the budget; returns final epsilon."""
        if self.privatization.total_batch > n:
            raise ConfigurationError(
                f"batch size {self.privatization.total_batch} exceeds dataset size {n}"
            )
        eps = self.epsilon_after(self.steps, n)
        if self.budget is not None and self.privatization.noise_multiplier > 0 and eps > self.budget.epsilon:
            raise ConfigurationError(
                f"{self.steps} steps spend epsilon {eps:.4f} > budget {self.budget.epsilon}"
            )
        return eps


@dataclass
class MetricsRow:
    step: int
    epsilon_spent: float
    train_accuracy: float
    eval_accuracy: float
    loss: float
    ema_eval_accuracy: float

    def csv_fields(self) -> List[str]:
        return [
            str(self.step),
            _fmt(self.epsilon_spent),
            _fmt(self.train_accuracy),
            _fmt(self.eval_accuracy),
            _fmt(self.loss),
            _fmt(self.ema_eval_accuracy),
        ]


def _fmt(x: float) -> str:
    # Fixed precision keeps CSVs byte-stable across device layouts, whose
    # results agree only to rounding.
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


def metrics_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


@dataclass
class TrainResult:
    params: ModelParams
    ema_params: ModelParams
    metrics: List[MetricsRow] = field(default_factory=list)
    epsilon: float = 0.0


# --- one step ------------------------------------------------------------------


def batch_contributions(
    params: ModelParams, views: np.ndarray, labels: np.ndarray, clip_norm: float, grad_fn=None
) -> tuple:
    """Per-example contributions from a (B, K, ...) stack of views; returns (losses, (B, P)).

    ``grad_fn(params, inputs, labels) -> (losses, per-example grads)`` defaults
    to the model's cross-entropy.
    """
    b, k = views.shape[:2]
    grad_fn = grad_fn or models.loss_and_per_example_grads
    losses, grads = grad_fn(params, views.reshape((b * k,) + views.shape[2:]), np.repeat(labels, k))
    contributions = contribution_from_augmentations(grads.reshape(b, k, -1), clip_norm)
    return losses.reshape(b, k).mean(axis=1), contributions


def dp_sgd_step(
    params: ModelParams,
    views: np.ndarray,
    labels: np.ndarray,
    config: PrivatizationConfig,
    key: NoiseKey,
    learning_rate: float,
    active: Optional[np.ndarray] = None,
    grad_fn=None,
) -> ModelParams:
    """One update ``w <- w - lr * privatized_gradient``.

    Args:
      views: (B, K, ...) array, K augmented views of each of the B examples.
      labels: (B,) labels.
      active: optional (B,) mask; inactive slots contribute zero, which keeps
        the batch geometry fixed when an example is absent.
      grad_fn: per-example loss and gradient function, see batch_contributions.
    """
    return _step(params, views, labels, config, key, learning_rate, active, grad_fn)[0]


def _step(params, views, labels, config, key, learning_rate, active=None, grad_fn=None):
    views = np.asarray(views, dtype=np.float64)
    if views.shape[:2] != (config.total_batch, config.augmult):
        raise ShapeError(
            f"views of shape {views.shape[:2]} do not match (batch, augmult) = "
            f"({config.total_batch}, {config.augmult})"
        )
    losses, contributions = batch_contributions(params, views, labels, config.clip_norm, grad_fn)
    if active is not None:
        contributions = contributions * np.asarray(active, dtype=np.float64)[:, None]
    update = privatize_step(to_geometry(contributions, config), config, key)
    if learning_rate == 0:
        return params, losses
    return params.replace(params.vector - learning_rate * update), losses


# --- training loop -------------------------------------------------------------------


def _views(dataset: Dataset, idx: np.ndarray, k: int, spec: Optional[AugmentSpec], rng) -> np.ndarray:
    if spec is None or not dataset.is_image or spec.is_identity:
        return np.repeat(dataset.inputs[idx][:, None], k, axis=1)
    return np.stack([sample_multiplicity(dataset.inputs[i], k, spec, rng) for i in idx])


def train(
    model_spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
    init: Optional[ModelParams] = None,
    active: Optional[np.ndarray] = None,
    noise_seed: Optional[int] = None,
) -> TrainResult:
    """Runs ``config.steps`` DP-SGD steps over shuffled epochs.

    Randomness comes from named sub-streams of ``config.seed``. ``init``
    overrides the initialization and ``noise_seed`` the noise stream, which
    is how audits share everything but the noise between models. ``active``
    masks examples out of the gradient sum without changing the batch size.
    """
    n = len(dataset)
    eps_final = config.check_budget(n)
    pc = config.privatization
    params = init if init is not None else models.init_params(model_spec, substream(config.seed, "init"))
    if params.spec != model_spec:
        raise ConfigurationError("initial parameters were built for a different model spec")
    ema = EmaState.start(params, config.ema_decay)
    result = TrainResult(params, params, [], eps_final)
    if config.steps == 0:
        return result

    shuffle_rng = substream(config.seed, "shuffle")
    augment_rng = substream(config.seed, "augment")
    if noise_seed is None:
        noise_seed = derive_seed(config.seed, "noise")
    active = None if active is None else np.asarray(active, dtype=bool)
    eval_set = eval_dataset if eval_dataset is not None else dataset
    curve = None
    if pc.noise_multiplier > 0 and config.eval_cadence:
        curve = accountant.rdp_curve(config.sampling_ratio(n), pc.noise_multiplier)

    batches = iter(())
    for step in range(1, config.steps + 1):
        idx = next(batches, None)
        if idx is None:
            batches = epoch_batches(n, pc.total_batch, shuffle_rng)
            idx = next(batches)
        views = _views(dataset, idx, pc.augmult, config.augment, augment_rng)
        params, losses = _step(
            params,
            views,
            dataset.labels[idx],
            pc,
            NoiseKey(noise_seed, step),
            config.learning_rate,
            None if active is None else active[idx],
        )
        ema = ema_update(ema, params)
        if config.eval_cadence and step % config.eval_cadence == 0:
            if curve is not None:
                eps = accountant.epsilon_from_curve(curve, step, config.budget.delta, config.conversion)[0]
            else:
                eps = config.epsilon_after(step, n)
            ema_params = params.replace(ema.average)
            result.metrics.append(
                MetricsRow(
                    step=step,
                    epsilon_spent=eps,
                    train_accuracy=models.accuracy(params, dataset.inputs, dataset.labels),
                    eval_accuracy=models.accuracy(params, eval_set.inputs, eval_set.labels),
                    loss=float(np.mean(losses)),
                    ema_eval_accuracy=models.accuracy(ema_params, eval_set.inputs, eval_set.labels),
                )
            )
    result.params = params
    result.ema_params = params.replace(ema.average)
    return result


# --- sweeps ----------------------------------------------------------------------

SWEEP_AXES = ("noise_multiplier", "steps", "learning_rate", "batch_size", "augmult")

SWEEP_HEADER = (
    "point",
    "noise_multiplier",
    "steps",
    "learning_rate",
    "batch_size",
    "augmult",
    "epsilon",
    "train_acc",
    "eval_acc",
    "ema_eval_acc",
    "status",
)


@dataclass
class SweepRow:
    point: int
    noise_multiplier: float
    steps: int
    learning_rate: float
    batch_size: int
    augmult: int
    epsilon: float = math.nan
    train_accuracy: float = math.nan
    eval_accuracy: float = math.nan
    ema_eval_accuracy: float = math.nan
    status: str = "ok"

    @property
    def skipped(self) -> bool:
        return self.status != "ok"

    def csv_fields(self) -> List[str]:
        return [
            str(self.point),
            _fmt(self.noise_multiplier),
            str(self.steps),
            repr(float(self.learning_rate)),
            str(self.batch_size),
            str(self.augmult),
            _fmt(self.epsilon),
            _fmt(self.train_accuracy),
            _fmt(self.eval_accuracy),
            _fmt(self.ema_eval_accuracy),
            self.status,
        ]


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def grid_points(grid: Dict[str, Sequence]) -> List[Dict[str, object]]:
    """Cartesian product of the grid axes, in the axis order of SWEEP_AXES."""
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ConfigurationError(f"unknown sweep axes {sorted(unknown)}")
    if "noise_multiplier" in grid and "steps" in grid:
        raise ConfigurationError("sweep either noise_multiplier or steps; the other is calibrated")
    axes = [a for a in SWEEP_AXES if a in grid]
    if not axes or any(len(grid[a]) == 0 for a in axes):
        raise ConfigurationError("empty sweep grid")
    return [dict(zip(axes, values)) for values in itertools.product(*(grid[a] for a in axes))]


def sweep(
    grid: Dict[str, Sequence],
    model_spec: ModelSpec,
    dataset: Dataset,
    budget: PrivacyBudget,
    base: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
) -> List[SweepRow]:
    """Trains one model per grid point, calibrating sigma or T against ``budget``.

    Axes missing from ``grid`` take their value from ``base``. Points that
    cannot be made feasible are returned with a "skipped: ..." status.
    """
    rows = []
    n = len(dataset)
    for i, point in enumerate(grid_points(grid)):
        pc = base.privatization
        b = int(point.get("batch_size", pc.total_batch))
        k = int(point.get("augmult", pc.augmult))
        lr = float(point.get("learning_rate", base.learning_rate))
        row = SweepRow(i, math.nan, 0, lr, b, k)
        try:
            if b > n:
                raise ConfigurationError(f"batch size {b} exceeds dataset size {n}")
            q = b / n
            if "steps" in point:
                steps = int(point["steps"])
                sigma = accountant.calibrate_sigma(budget, q, steps, conversion=base.conversion)
            else:
                sigma = float(point.get("noise_multiplier", pc.noise_multiplier))
                steps = accountant.calibrate_steps(budget, q, sigma, conversion=base.conversion)
                if steps == 0:
                    raise ConfigurationError("no step fits the budget")
            row.noise_multiplier, row.steps = sigma, steps
            acc = pc.accumulation_steps if b % pc.accumulation_steps == 0 else 1
            privatization = replace(
                PrivatizationConfig.single_device(b, acc, clip_norm=pc.clip_norm, augmult=k),
                noise_multiplier=sigma,
            )
            config = replace(
                base, learning_rate=lr, privatization=privatization, steps=steps, budget=budget, eval_cadence=0
            )
            result = train(model_spec, dataset, config, eval_dataset)
        except (ConfigurationError, CalibrationError, DomainError) as exc:
            row.status = f"skipped: {exc}"
            rows.append(row)
            continue
        ev = eval_dataset if eval_dataset is not None else dataset
        row.epsilon = result.epsilon
        row.train_accuracy = models.accuracy(result.params, dataset.inputs, dataset.labels)
        row.eval_accuracy = models.accuracy(result.params, ev.inputs, ev.labels)
        row.ema_eval_accuracy = models.accuracy(result.ema_params, ev.inputs, ev.labels)
        rows.append(row)
    return rows


def best_row(rows: Sequence[SweepRow], metric: str = "ema_eval_accuracy") -> Optional[SweepRow]:
    """Highest-scoring completed row; the first wins ties."""
    done = [r for r in rows if not r.skipped]
    if not done:
        return None
    return max(done, key=lambda r: getattr(r, metric))
