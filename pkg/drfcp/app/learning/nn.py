# app/learning/nn.py
"""
Dense feed-forward regression network in float64 numpy with hand-written
reverse mode, inverted dropout (train and Monte-Carlo inference), optional
batch normalization on hidden layers, Adam, and a plateau learning-rate /
early-stopping schedule.

Hidden layer order: linear -> batchnorm (optional) -> activation -> dropout.
The output layer is linear with no dropout. Layers followed by batchnorm
carry no bias; the batchnorm shift takes its place.
"""
import copy
import enum
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..exceptions import DataError, DivergenceError, TrainingDivergence
from .dataset import Dataset

logger = logging.getLogger(__name__)

FORMAT_VERSION = "drfcp.mlp/1"
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

Array = np.ndarray
LossFn = Callable[[Array, Array], Tuple[float, Array]]


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    MC_DROPOUT = "mc_dropout"


ACTIVATIONS = ("relu", "sigmoid", "tanh")


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: Tuple[int, ...] = (64, 32, 1)
    dropout_prob: float = 0.1
    use_batchnorm: bool = False
    learning_rate: float = 1e-4
    batch_size: int = 256
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if not self.layer_sizes or any(s < 1 for s in self.layer_sizes):
            raise DataError(f"layer sizes must be positive integers, got {self.layer_sizes}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise DataError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be a positive integer")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["layer_sizes"] = list(self.layer_sizes)
        return payload


@dataclass(frozen=True)
class TrainSchedule:
    patience_lr: int = 5
    patience_stop: int = 10
    lr_decay_factor: float = 10.0
    max_epochs: int = 200
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.patience_lr < 1 or self.patience_stop < self.patience_lr:
            raise DataError("schedule needs 1 <= patience_lr <= patience_stop")
        if self.lr_decay_factor <= 1.0:
            raise DataError("lr_decay_factor must exceed 1")
        if self.max_epochs < 1:
            raise DataError("max_epochs must be a positive integer")


class MlpModel:
    """
    Parameters live in ``params`` (W{i}, b{i}, gamma{i}, beta{i}); batchnorm
    running statistics live in ``buffers`` (running_mean{i}, running_var{i}).
    """

    def __init__(self, config: MlpConfig, input_size: int, params: Dict[str, Array], buffers: Dict[str, Array]):
        self.config = config
        self.input_size = int(input_size)
        self.params = params
        self.buffers = buffers

    @classmethod
    def initialize(cls, config: MlpConfig, input_size: int) -> "MlpModel":
        """Seeded He-style uniform weights, zero biases, unit batchnorm scales."""
        if input_size < 0:
            raise DataError("input_size must be non-negative")
        rng = np.random.default_rng(config.seed)
        params: Dict[str, Array] = {}
        buffers: Dict[str, Array] = {}
        fan_in = input_size
        for i, width in enumerate(config.layer_sizes):
            bound = math.sqrt(6.0 / max(fan_in, 1))
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, width))
            if cls._layer_has_batchnorm(config, i):
                params[f"gamma{i}"] = np.ones(width)
                params[f"beta{i}"] = np.zeros(width)
                buffers[f"running_mean{i}"] = np.zeros(width)
                buffers[f"running_var{i}"] = np.ones(width)
            else:
                params[f"b{i}"] = np.zeros(width)
            fan_in = width
        return cls(config, input_size, params, buffers)

    @staticmethod
    def _layer_has_batchnorm(config: MlpConfig, index: int) -> bool:
        return config.use_batchnorm and index < len(config.layer_sizes) - 1

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_sizes)

    def has_batchnorm(self, index: int) -> bool:
        return self._layer_has_batchnorm(self.config, index)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.config,
            self.input_size,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def with_config(self, **changes) -> "MlpModel":
        clone = self.copy()
        clone.config = MlpConfig(**{**self.config.to_dict(), **changes})
        return clone

    def predict(self, features) -> Array:
        outputs, _ = forward(self, features, Mode.EVAL)
        return outputs[:, 0] if outputs.shape[1] == 1 else outputs

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params.values())


# ---------- Activations ----------

def _activate(name: str, z: Array) -> Array:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return expit(z)
    return np.tanh(z)


def _activation_grad(name: str, z: Array, a: Array) -> Array:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


# ---------- Forward / backward ----------

@dataclass
class LayerCache:
    inputs: Array
    pre_activation: Optional[Array] = None
    activation: Optional[Array] = None
    dropout_mask: Optional[Array] = None
    xhat: Optional[Array] = None
    inv_std: Optional[Array] = None
    batch_stats: bool = False


def _uses_dropout(mode: Mode, config: MlpConfig) -> bool:
    return mode in (Mode.TRAIN, Mode.MC_DROPOUT) and config.dropout_prob > 0


def forward(model: MlpModel, batch, mode: Mode = Mode.EVAL, seed=None, *, update_stats: bool = True) -> Tuple[Array, List[LayerCache]]:
    """
    Eval mode is deterministic. Train and mc_dropout draw Bernoulli keep
    masks (keep-prob 1 - p, scaled by 1 / (1 - p)) from ``seed`` (an int or
    a numpy Generator). Batchnorm uses batch statistics only in train mode,
    where it also updates the running statistics unless ``update_stats`` is
    false.
    """
    mode = Mode(mode)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.input_size:
        raise DataError(f"batch of shape {x.shape} does not match input size {model.input_size}")

    config = model.config
    rng = np.random.default_rng(seed) if _uses_dropout(mode, config) else None
    keep = 1.0 - config.dropout_prob
    caches: List[LayerCache] = []
    h = x
    last = model.n_layers - 1
    for i in range(model.n_layers):
        cache = LayerCache(inputs=h)
        z = h @ model.params[f"W{i}"]
        if i == last:
            h = z + model.params[f"b{i}"]
            caches.append(cache)
            break

        if model.has_batchnorm(i):
            z = _batchnorm_forward(model, i, z, cache, mode is Mode.TRAIN, update_stats)
        else:
            z = z + model.params[f"b{i}"]
        a = _activate(config.activation, z)
        cache.pre_activation, cache.activation = z, a
        if rng is not None:
            cache.dropout_mask = (rng.random(a.shape) < keep) / keep
            a = a * cache.dropout_mask
        h = a
        caches.append(cache)
    return h, caches


def _batchnorm_forward(model: MlpModel, i: int, z: Array, cache: LayerCache, batch_stats: bool, update_stats: bool) -> Array:
    gamma, beta = model.params[f"gamma{i}"], model.params[f"beta{i}"]
    if batch_stats:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            n = z.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            rm, rv = model.buffers[f"running_mean{i}"], model.buffers[f"running_var{i}"]
            model.buffers[f"running_mean{i}"] = (1 - BATCHNORM_MOMENTUM) * rm + BATCHNORM_MOMENTUM * mean
            model.buffers[f"running_var{i}"] = (1 - BATCHNORM_MOMENTUM) * rv + BATCHNORM_MOMENTUM * unbiased
    else:
        mean = model.buffers[f"running_mean{i}"]
        var = model.buffers[f"running_var{i}"]
    inv_std = 1.0 / np.sqrt(var + BATCHNORM_EPS)
    xhat = (z - mean) * inv_std
    cache.xhat, cache.inv_std, cache.batch_stats = xhat, inv_std, batch_stats
    return gamma * xhat + beta


def backward(model: MlpModel, caches: Sequence[LayerCache], grad_outputs) -> Dict[str, Array]:
    """Reverse-mode gradients for every entry of ``model.params``."""
    g = np.asarray(grad_outputs, dtype=np.float64)
    grads: Dict[str, Array] = {}
    last = model.n_layers - 1
    for i in range(last, -1, -1):
        cache = caches[i]
        if i != last:
            if cache.dropout_mask is not None:
                g = g * cache.dropout_mask
            g = g * _activation_grad(model.config.activation, cache.pre_activation, cache.activation)
            if model.has_batchnorm(i):
                g = _batchnorm_backward(model, i, g, cache, grads)
            else:
                grads[f"b{i}"] = g.sum(axis=0)
        else:
            grads[f"b{i}"] = g.sum(axis=0)
        grads[f"W{i}"] = cache.inputs.T @ g
        g = g @ model.params[f"W{i}"].T
    return grads


def _batchnorm_backward(model: MlpModel, i: int, g: Array, cache: LayerCache, grads: Dict[str, Array]) -> Array:
    gamma = model.params[f"gamma{i}"]
    grads[f"gamma{i}"] = (g * cache.xhat).sum(axis=0)
    grads[f"beta{i}"] = g.sum(axis=0)
    dxhat = g * gamma
    if not cache.batch_stats:
        return dxhat * cache.inv_std
    n = g.shape[0]
    return (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
    )


# ---------- Loss ----------

def loss_mse(outputs, targets) -> float:
    """Mean of (output - target)^2 over samples."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    loss = float(np.mean((outputs - targets) ** 2))
    if not math.isfinite(loss):
        raise DivergenceError("mean squared error is not finite; reduce the learning rate")
    return loss


def loss_mse_grad(outputs, targets) -> Array:
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    return 2.0 * (outputs - targets) / outputs.shape[0]


def mse_objective(outputs, targets) -> Tuple[float, Array]:
    return loss_mse(outputs, targets), loss_mse_grad(outputs, targets)


# ---------- Adam ----------

@dataclass
class OptimizerState:
    m: Dict[str, Array]
    v: Dict[str, Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, **hyper) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
            **hyper,
        )

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def adam_step(model: MlpModel, grads: Dict[str, Array], state: OptimizerState, lr: float) -> Tuple[MlpModel, OptimizerState]:
    """Bias-corrected Adam update, applied in place; returns (model, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if state.m[name].shape != g.shape:
            raise DataError(f"optimizer state for {name} has shape {state.m[name].shape}, gradient {g.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        model.params[name] = model.params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state


# ---------- Schedule ----------

@dataclass(frozen=True)
class ScheduleDecision:
    improved: bool
    lr_decayed: bool
    stop: bool
    learning_rate: float


class PlateauSchedule:
    """
    Tracks validation loss. ``patience_lr`` consecutive non-improving epochs
    divide the learning rate by ``lr_decay_factor`` (again every further
    ``patience_lr``); ``patience_stop`` of them stop training. Improvement
    means a decrease of at least ``min_delta``.
    """

    def __init__(self, schedule: TrainSchedule, learning_rate: float):
        self.schedule = schedule
        self.learning_rate = learning_rate
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> ScheduleDecision:
        if val_loss <= self.best - self.schedule.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return ScheduleDecision(True, False, False, self.learning_rate)

        self.bad_epochs += 1
        if self.bad_epochs >= self.schedule.patience_stop:
            return ScheduleDecision(False, False, True, self.learning_rate)
        if self.bad_epochs % self.schedule.patience_lr == 0:
            self.learning_rate /= self.schedule.lr_decay_factor
            return ScheduleDecision(False, True, False, self.learning_rate)
        return ScheduleDecision(False, False, False, self.learning_rate)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    improved: bool
    event: Optional[str] = None


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def best_epoch(self) -> Optional[int]:
        improved = [r.epoch for r in self.records if r.improved]
        return improved[-1] if improved else None

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)

    def events(self) -> List[Tuple[int, str]]:
        return [(r.epoch, r.event) for r in self.records if r.event]

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "records": [asdict(r) for r in self.records]}


def record_epoch(history: TrainingHistory, epoch: int, train_loss: float, val_loss: float, decision: ScheduleDecision, label: str):
    event = "stop" if decision.stop else "lr_decay" if decision.lr_decayed else None
    history.append(EpochRecord(epoch, train_loss, val_loss, decision.learning_rate, decision.improved, event))
    logger.debug("%s epoch %d: train %.6g val %.6g lr %.3g", label, epoch, train_loss, val_loss, decision.learning_rate)
    if decision.lr_decayed:
        logger.info("%s epoch %d: validation plateau, learning rate -> %.3g", label, epoch, decision.learning_rate)
    if decision.stop:
        logger.info("%s epoch %d: early stop, best epoch %s", label, epoch, history.best_epoch)


def minibatches(n_samples: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def train(model: MlpModel, train_set: Dataset, val_set: Dataset, schedule: TrainSchedule, loss_fn: LossFn = mse_objective) -> Tuple[MlpModel, TrainingHistory]:
    """
    Minibatch Adam on ``loss_fn`` with seeded shuffling; validation loss in
    eval mode drives the plateau schedule. Returns the best-validation
    snapshot and the history.
    """
    if train_set.n_samples == 0 or val_set.n_samples == 0:
        raise DataError("training and validation sets must be non-empty")
    config = model.config
    model = model.copy()
    state = OptimizerState.for_model(model)
    rng = np.random.default_rng(config.seed)
    plateau = PlateauSchedule(schedule, config.learning_rate)
    history = TrainingHistory()
    best = model.copy()
    # a batch of one cannot be batch-normalized
    min_batch = 2 if config.use_batchnorm else 1

    X, y = train_set.features, train_set.targets
    for epoch in range(1, schedule.max_epochs + 1):
        total, seen = 0.0, 0
        try:
            for idx in minibatches(len(y), config.batch_size, rng, min_batch):
                outputs, caches = forward(model, X[idx], Mode.TRAIN, rng)
                loss, grad = loss_fn(outputs, y[idx])
                adam_step(model, backward(model, caches, grad), state, plateau.learning_rate)
                total += loss * len(idx)
                seen += len(idx)
            val_loss, _ = loss_fn(forward(model, val_set.features, Mode.EVAL)[0], val_set.targets)
        except DivergenceError as ex:
            raise TrainingDivergence(f"network training diverged at epoch {epoch}: {ex}", history) from ex

        decision = plateau.step(val_loss)
        record_epoch(history, epoch, total / max(seen, 1), val_loss, decision, "mlp")
        if decision.improved:
            best = model.copy()
        if decision.stop:
            break
    return best, history


# ---------- Gradient check ----------

def grad_check(
    model: MlpModel,
    batch,
    epsilon: float = 1e-5,
    *,
    targets=None,
    loss_fn: Optional[Callable[[Array], Tuple[float, Array]]] = None,
    mode: Mode = Mode.EVAL,
    seed: int = 0,
    max_parameters: int = 10_000,
    analytic: Optional[Dict[str, Array]] = None,
) -> float:
    """
    Max relative error between analytic and central-difference gradients.
    The objective is ``loss_fn(outputs)`` or, by default, MSE against
    ``targets`` (zeros when omitted). Above ``max_parameters`` a seeded
    random subset of entries is checked. ``analytic`` overrides the
    backward pass, which lets tests inject corrupted gradients.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if loss_fn is None:
        goal = np.zeros(batch.shape[0]) if targets is None else np.asarray(targets, dtype=np.float64)
        loss_fn = lambda out: mse_objective(out, goal)  # noqa: E731

    def objective() -> float:
        outputs, _ = forward(model, batch, mode, seed, update_stats=False)
        return loss_fn(outputs)[0]

    if analytic is None:
        outputs, caches = forward(model, batch, mode, seed, update_stats=False)
        analytic = backward(model, caches, loss_fn(outputs)[1])

    entries = [(name, idx) for name in sorted(model.params) for idx in np.ndindex(model.params[name].shape)]
    if len(entries) > max_parameters:
        pick = np.random.default_rng(seed).choice(len(entries), size=max_parameters, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in entries:
        param = model.params[name]
        original = param[idx]
        param[idx] = original + epsilon
        plus = objective()
        param[idx] = original - epsilon
        minus = objective()
        param[idx] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        exact = analytic[name][idx]
        error = abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-6)
        worst = max(worst, error)
    return worst


# ---------- Persistence ----------

def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "input_size": model.input_size,
        "params": {k: model.params[k].tolist() for k in sorted(model.params)},
        "buffers": {k: model.buffers[k].tolist() for k in sorted(model.buffers)},
    }


def model_from_dict(payload: dict) -> MlpModel:
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported network format {payload.get('format_version')!r}")
    config = MlpConfig(**payload["config"])
    input_size = int(payload["input_size"])
    reference = MlpModel.initialize(config, input_size)
    params = {}
    for name, expected in reference.params.items():
        value = np.asarray(payload["params"][name], dtype=np.float64).reshape(expected.shape)
        params[name] = value
    buffers = {name: np.asarray(payload["buffers"][name], dtype=np.float64) for name in reference.buffers}
    return MlpModel(config, input_size, params, buffers)
