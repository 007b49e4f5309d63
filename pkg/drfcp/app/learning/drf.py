# app/learning/drf.py
"""
Deep regression forest: K complete binary trees whose split nodes read
sigmoid routing probabilities off a shared network backbone, with a Gaussian
distribution at every leaf.

Split nodes are numbered breadth-first (root 0, children of node j at level
d are the nodes 2j and 2j + 1 of level d + 1); leaves are numbered left to
right. s_n is the probability of routing LEFT at node n.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from ..exceptions import DataError, DivergenceError, TrainingDivergence
from .dataset import Dataset
from .nn import (
    MlpConfig,
    MlpModel,
    Mode,
    OptimizerState,
    PlateauSchedule,
    TrainingHistory,
    TrainSchedule,
    adam_step,
    backward,
    forward,
    minibatches,
    model_from_dict,
    model_to_dict,
    record_epoch,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = "drfcp.drf/1"
VARIANCE_FLOOR = 1e-6
RESPONSIBILITY_FLOOR = 1e-12
LEAF_ITERATIONS = 20
LOG_2PI = math.log(2.0 * math.pi)

Array = np.ndarray


def _frozen(values, dtype=np.float64) -> Array:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TreeTopology:
    depth: int
    routing: Array

    def __post_init__(self):
        if self.depth < 1:
            raise DataError(f"tree depth must be positive, got {self.depth}")
        routing = _frozen(self.routing, dtype=np.int64).reshape(-1)
        if routing.shape[0] != 2 ** self.depth - 1:
            raise DataError(f"depth {self.depth} needs {2 ** self.depth - 1} routing entries, got {routing.shape[0]}")
        if np.any(routing < 0):
            raise DataError("routing indices must be non-negative")
        if len(np.unique(routing)) != len(routing):
            raise DataError("routing map must be injective within a tree")
        object.__setattr__(self, "routing", routing)

    @property
    def n_split(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth

    @classmethod
    def random(cls, depth: int, width: int, rng: np.random.Generator) -> "TreeTopology":
        n_split = 2 ** depth - 1
        if width < n_split:
            raise DataError(f"backbone width {width} cannot route {n_split} split nodes injectively")
        return cls(depth, rng.choice(width, size=n_split, replace=False))


@dataclass(frozen=True)
class LeafDistribution:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= VARIANCE_FLOOR:
            raise DataError(f"leaf variance {self.sigma2} below floor {VARIANCE_FLOOR}")


@dataclass(frozen=True)
class DeepRegressionTree:
    topology: TreeTopology
    mu: Array
    sigma2: Array

    def __post_init__(self):
        mu = _frozen(self.mu)
        sigma2 = _frozen(np.maximum(np.asarray(self.sigma2, dtype=np.float64), VARIANCE_FLOOR))
        if mu.shape != (self.topology.n_leaves,) or sigma2.shape != mu.shape:
            raise DataError(f"leaf tables must have {self.topology.n_leaves} entries")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma2))):
            raise DataError("leaf parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    def leaf(self, index: int) -> LeafDistribution:
        return LeafDistribution(float(self.mu[index]), float(self.sigma2[index]))

    def with_leaves(self, mu, sigma2) -> "DeepRegressionTree":
        return DeepRegressionTree(self.topology, mu, sigma2)


@dataclass(frozen=True)
class DrfConfig:
    n_trees: int = 5
    depth: int = 4
    hidden_layers: Tuple[int, ...] = (64, 32)
    routing_width: int = 32
    use_batchnorm: bool = True
    dropout_prob: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 256
    leaf_iterations: int = LEAF_ITERATIONS
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.n_trees < 1:
            raise DataError("a forest needs at least one tree")
        if self.routing_width < 2 ** self.depth - 1:
            raise DataError(
                f"routing width {self.routing_width} is smaller than the {2 ** self.depth - 1} split nodes of a depth-{self.depth} tree"
            )
        if self.leaf_iterations < 0:
            raise DataError("leaf_iterations must be non-negative")

    def backbone_config(self) -> MlpConfig:
        return MlpConfig(
            layer_sizes=self.hidden_layers + (self.routing_width,),
            dropout_prob=self.dropout_prob,
            use_batchnorm=self.use_batchnorm,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
            activation=self.activation,
        )


@dataclass(frozen=True)
class Forest:
    backbone: MlpModel
    trees: Tuple[DeepRegressionTree, ...]

    def __post_init__(self):
        trees = tuple(self.trees)
        if not trees:
            raise DataError("a forest needs at least one tree")
        width = self.backbone.config.output_size
        for k, tree in enumerate(trees):
            if int(tree.topology.routing.max()) >= width:
                raise DataError(f"tree {k} routes to backbone output {int(tree.topology.routing.max())} of {width}")
        object.__setattr__(self, "trees", trees)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def with_trees(self, trees: Sequence[DeepRegressionTree]) -> "Forest":
        return Forest(self.backbone, tuple(trees))

    def copy(self) -> "Forest":
        return Forest(self.backbone.copy(), self.trees)

    def predict(self, features) -> Array:
        return forest_predict(self, np.atleast_2d(features))


@dataclass(frozen=True)
class DrfPrediction:
    mean: Array
    mixture_std: Array
    ensemble_std: Array

    def __post_init__(self):
        for name in ("mixture_std", "ensemble_std"):
            values = getattr(self, name)
            if np.any(values < 0) or not np.all(np.isfinite(values)):
                raise DataError(f"{name} must be finite and non-negative")


# ---------- Routing ----------

def split_probabilities(topology: TreeTopology, backbone_outputs) -> Array:
    """s_n = sigmoid(backbone_outputs[phi(n)]) for every split node."""
    outputs = np.asarray(backbone_outputs, dtype=np.float64)
    if outputs.shape[-1] <= int(topology.routing.max()):
        raise DataError(f"backbone outputs of width {outputs.shape[-1]} do not cover routing index {int(topology.routing.max())}")
    return expit(outputs[..., topology.routing])


def _level(depth: int) -> slice:
    return slice(2 ** depth - 1, 2 ** (depth + 1) - 1)


def leaf_reach_probabilities(topology: TreeTopology, s) -> Array:
    """P(leaf | x): product of s_n (left) or 1 - s_n (right) along each root path."""
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[1] != topology.n_split:
        raise DataError(f"expected {topology.n_split} split probabilities, got {s.shape[1]}")
    n = s.shape[0]
    reach = np.ones((n, 1))
    for d in range(topology.depth):
        level = s[:, _level(d)]
        reach = np.stack([reach * level, reach * (1.0 - level)], axis=2).reshape(n, -1)
    return reach[0] if single else reach


def _log_leaf_reach(topology: TreeTopology, logits: Array) -> Array:
    n = logits.shape[0]
    log_left, log_right = log_expit(logits), log_expit(-logits)
    reach = np.zeros((n, 1))
    for d in range(topology.depth):
        level = _level(d)
        reach = np.stack([reach + log_left[:, level], reach + log_right[:, level]], axis=2).reshape(n, -1)
    return reach


# ---------- Tree / forest statistics ----------

def tree_predict(tree: DeepRegressionTree, P) -> Array:
    """Mixture mean sum_l P(l|x) mu_l."""
    return np.asarray(P, dtype=np.float64) @ tree.mu


def tree_variance(tree: DeepRegressionTree, P) -> Array:
    """
    Mixture variance by the law of total variance, computed in centred form
    sum_l P sigma_l^2 + sum_l P (mu_l - m)^2, which is non-negative term by term.
    """
    P = np.asarray(P, dtype=np.float64)
    mean = P @ tree.mu
    between = (P * (tree.mu - np.asarray(mean)[..., None]) ** 2).sum(axis=-1)
    return P @ tree.sigma2 + between


def _leaf_probabilities(trees: Sequence[DeepRegressionTree], outputs: Array) -> Array:
    return np.stack([
        leaf_reach_probabilities(t.topology, split_probabilities(t.topology, outputs)) for t in trees
    ])


def forest_leaf_probabilities(forest: Forest, features) -> Array:
    """(K, n, L) leaf reach probabilities with the backbone in eval mode."""
    outputs, _ = forward(forest.backbone, np.atleast_2d(features), Mode.EVAL)
    return _leaf_probabilities(forest.trees, outputs)


def _per_tree(forest: Forest, features, statistic) -> Array:
    features = np.asarray(features, dtype=np.float64)
    probs = forest_leaf_probabilities(forest, features)
    return np.stack([statistic(tree, probs[k]) for k, tree in enumerate(forest.trees)])


def _unwrap(features, values: Array):
    return float(values[0]) if np.asarray(features).ndim == 1 else values


def tree_predictions(forest: Forest, features) -> Array:
    """(K, n) point predictions of every tree."""
    return _per_tree(forest, features, tree_predict)


def forest_predict(forest: Forest, features):
    return _unwrap(features, tree_predictions(forest, features).mean(axis=0))


def forest_variance(forest: Forest, features):
    return _unwrap(features, _per_tree(forest, features, tree_variance).mean(axis=0))


def ensemble_variance(forest: Forest, features):
    """Population variance (1/K) of the tree point predictions."""
    return _unwrap(features, tree_predictions(forest, features).var(axis=0))


def predict_distribution(forest: Forest, features) -> DrfPrediction:
    probs = forest_leaf_probabilities(forest, features)
    means = np.stack([tree_predict(t, probs[k]) for k, t in enumerate(forest.trees)])
    variances = np.stack([tree_variance(t, probs[k]) for k, t in enumerate(forest.trees)])
    return DrfPrediction(
        mean=means.mean(axis=0),
        mixture_std=np.sqrt(variances.mean(axis=0)),
        ensemble_std=np.sqrt(means.var(axis=0)),
    )


# ---------- Likelihood ----------

def _log_normal(y: Array, mu: Array, sigma2: Array) -> Array:
    return -0.5 * (LOG_2PI + np.log(sigma2) + (y - mu) ** 2 / sigma2)


def _split_gradients(topology: TreeTopology, responsibilities: Array, s: Array) -> Array:
    """
    d(-log sum_l P_l N_l)/d(logit_n) = s_n * R_right(n) - (1 - s_n) * R_left(n),
    where R_side sums the responsibilities of the leaves under that child.
    """
    n = responsibilities.shape[0]
    grads = np.empty((n, topology.n_split))
    sums = responsibilities
    for d in range(topology.depth - 1, -1, -1):
        pairs = sums.reshape(n, 2 ** d, 2)
        left, right = pairs[..., 0], pairs[..., 1]
        level_s = s[:, _level(d)]
        grads[:, _level(d)] = level_s * right - (1.0 - level_s) * left
        sums = left + right
    return grads


def _nll_terms(trees: Sequence[DeepRegressionTree], outputs: Array, targets: Array) -> Tuple[float, Array, Array]:
    """(mean NLL, gradient wrt backbone outputs, (K, n, L) leaf probabilities)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    n, k_trees = outputs.shape[0], len(trees)
    grad = np.zeros_like(outputs)
    probs = []
    total = 0.0
    for tree in trees:
        routing = tree.topology.routing
        logits = outputs[:, routing]
        log_reach = _log_leaf_reach(tree.topology, logits)
        log_weighted = log_reach + _log_normal(y, tree.mu, tree.sigma2)
        log_lik = logsumexp(log_weighted, axis=1)
        total -= log_lik.sum()
        responsibilities = np.exp(log_weighted - log_lik[:, None])
        grad[:, routing] += _split_gradients(tree.topology, responsibilities, expit(logits))
        probs.append(np.exp(log_reach))
    scale = 1.0 / (n * k_trees)
    loss = total * scale
    if not math.isfinite(loss):
        raise DivergenceError("forest negative log-likelihood is not finite")
    return loss, grad * scale, np.stack(probs)


def drf_nll_from_outputs(forest: Forest, outputs, targets) -> Tuple[float, Array]:
    """Mean NLL and its gradient with respect to the backbone outputs."""
    loss, grad, _ = _nll_terms(forest.trees, outputs, targets)
    return loss, grad


def drf_nll(forest: Forest, features, targets) -> float:
    """
    Mean over samples of -(1/K) sum_k log sum_l P_k(l|x) N(y; mu_l, sigma_l^2),
    backbone in eval mode.
    """
    outputs, _ = forward(forest.backbone, np.atleast_2d(features), Mode.EVAL)
    return drf_nll_from_outputs(forest, outputs, targets)[0]


def nll_from_leaf_probabilities(trees: Sequence[DeepRegressionTree], leaf_probs, targets) -> float:
    """Same objective as ``drf_nll`` with routing given as (K, n, L) probabilities."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    total = 0.0
    with np.errstate(divide="ignore"):
        for k, tree in enumerate(trees):
            log_weighted = np.log(leaf_probs[k]) + _log_normal(y, tree.mu, tree.sigma2)
            total -= logsumexp(log_weighted, axis=1).sum()
    return total / (y.shape[0] * len(trees))


# ---------- Leaf update ----------

def _leaf_em_step(log_reach: Array, y: Array, mu: Array, sigma2: Array) -> Tuple[Array, Array]:
    log_weighted = log_reach + _log_normal(y[:, None], mu, sigma2)
    responsibilities = np.exp(log_weighted - logsumexp(log_weighted, axis=1, keepdims=True))
    weight = responsibilities.sum(axis=0)
    active = weight >= RESPONSIBILITY_FLOOR
    safe = np.where(active, weight, 1.0)
    new_mu = np.where(active, responsibilities.T @ y / safe, mu)
    spread = (responsibilities * (y[:, None] - new_mu) ** 2).sum(axis=0) / safe
    new_sigma2 = np.maximum(np.where(active, spread, sigma2), VARIANCE_FLOOR)
    return new_mu, new_sigma2


def update_leaves(forest: Forest, routing_batches: Iterable[Tuple[Array, Array]], n_iterations: int = LEAF_ITERATIONS) -> Forest:
    """
    Responsibility-weighted re-estimation of every leaf (mu, sigma^2) with the
    routing held fixed. ``routing_batches`` yields ((K, n_b, L) leaf
    probabilities, (n_b,) targets) pairs; leaves whose total responsibility
    is below 1e-12 keep their parameters. Trees are updated independently.
    """
    batches = list(routing_batches)
    if not batches:
        raise DataError("leaf update needs at least one batch of routing probabilities")
    leaf_probs = np.concatenate([np.asarray(p, dtype=np.float64) for p, _ in batches], axis=1)
    y = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for _, t in batches])
    if leaf_probs.shape[0] != forest.n_trees or leaf_probs.shape[1] != y.shape[0]:
        raise DataError(f"routing batches of shape {leaf_probs.shape} do not match {forest.n_trees} trees and {y.shape[0]} targets")

    trees: List[DeepRegressionTree] = []
    with np.errstate(divide="ignore"):
        for k, tree in enumerate(forest.trees):
            log_reach = np.log(leaf_probs[k])
            mu, sigma2 = tree.mu.copy(), tree.sigma2.copy()
            for _ in range(n_iterations):
                mu, sigma2 = _leaf_em_step(log_reach, y, mu, sigma2)
            trees.append(tree.with_leaves(mu, sigma2))
    return forest.with_trees(trees)


# ---------- Construction / training ----------

def build_forest(config: DrfConfig, input_size: int, train_targets) -> Forest:
    """
    Seeded backbone, independent random injective routing per tree, leaf
    means drawn from the training targets and leaf variances set to the
    target variance.
    """
    y = np.asarray(train_targets, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise DataError("cannot initialise leaves without training targets")
    backbone = MlpModel.initialize(config.backbone_config(), input_size)
    rng = np.random.default_rng([config.seed, 1])
    variance = max(float(y.var()), VARIANCE_FLOOR)
    trees = []
    for _ in range(config.n_trees):
        topology = TreeTopology.random(config.depth, config.routing_width, rng)
        mu = rng.choice(y, size=topology.n_leaves, replace=True)
        trees.append(DeepRegressionTree(topology, mu, np.full(topology.n_leaves, variance)))
    return Forest(backbone, tuple(trees))


def train_drf(
    forest: Forest,
    train_set: Dataset,
    val_set: Dataset,
    schedule: TrainSchedule,
    leaf_iterations: int = LEAF_ITERATIONS,
) -> Tuple[Forest, TrainingHistory]:
    """
    Alternates one epoch of backbone Adam steps on the forest NLL (leaves
    frozen) with ``leaf_iterations`` leaf updates over the routing cached
    during that epoch (backbone frozen). Validation NLL drives the same
    plateau schedule as network training; the best snapshot is returned.
    """
    if train_set.n_samples == 0 or val_set.n_samples == 0:
        raise DataError("training and validation sets must be non-empty")
    backbone = forest.backbone.copy()
    config = backbone.config
    trees = forest.trees
    state = OptimizerState.for_model(backbone)
    rng = np.random.default_rng(config.seed)
    plateau = PlateauSchedule(schedule, config.learning_rate)
    history = TrainingHistory()
    best = Forest(backbone.copy(), trees)
    min_batch = 2 if config.use_batchnorm else 1

    X, y = train_set.features, train_set.targets
    for epoch in range(1, schedule.max_epochs + 1):
        cached = []
        total, seen = 0.0, 0
        try:
            for idx in minibatches(len(y), config.batch_size, rng, min_batch):
                outputs, caches = forward(backbone, X[idx], Mode.TRAIN, rng)
                loss, grad, leaf_probs = _nll_terms(trees, outputs, y[idx])
                adam_step(backbone, backward(backbone, caches, grad), state, plateau.learning_rate)
                cached.append((leaf_probs, y[idx]))
                total += loss * len(idx)
                seen += len(idx)
            trees = update_leaves(Forest(backbone, trees), cached, leaf_iterations).trees
            val_loss = drf_nll(Forest(backbone, trees), val_set.features, val_set.targets)
        except DivergenceError as ex:
            raise TrainingDivergence(f"forest training diverged at epoch {epoch}: {ex}", history) from ex

        decision = plateau.step(val_loss)
        record_epoch(history, epoch, total / max(seen, 1), val_loss, decision, "drf")
        if decision.improved:
            best = Forest(backbone.copy(), trees)
        if decision.stop:
            break
    return best, history


# ---------- Persistence ----------

def forest_to_dict(forest: Forest) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "backbone": model_to_dict(forest.backbone),
        "trees": [
            {
                "depth": tree.topology.depth,
                "routing": tree.topology.routing.tolist(),
                "mu": tree.mu.tolist(),
                "sigma2": tree.sigma2.tolist(),
            }
            for tree in forest.trees
        ],
    }


def forest_from_dict(payload: dict) -> Forest:
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported forest format {payload.get('format_version')!r}")
    trees = tuple(
        DeepRegressionTree(TreeTopology(int(t["depth"]), t["routing"]), t["mu"], t["sigma2"])
        for t in payload["trees"]
    )
    return Forest(model_from_dict(payload["backbone"]), trees)
