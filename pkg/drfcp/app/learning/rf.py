# app/learning/rf.py
"""
CART regression trees and bootstrap random forests, used as the residual
model of the RF-normalized conformal estimator.
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from ..exceptions import DataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "drfcp.rf/1"
# SSE values closer than this are treated as equal when picking a split
SPLIT_TIE_TOLERANCE = 1e-12

Array = np.ndarray


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    max_features: float = 1.0 / 3.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise DataError("n_trees must be a positive integer")
        if self.max_depth < 0:
            raise DataError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be a positive integer")
        if not 0.0 < self.max_features <= 1.0:
            raise DataError(f"max_features must lie in (0, 1], got {self.max_features}")

    def features_per_split(self, n_features: int) -> int:
        return max(1, int(round(self.max_features * n_features)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CartNode:
    """Leaf when ``feature`` is None; otherwise x[feature] <= threshold goes left."""

    value: float
    n_samples: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["CartNode"] = None
    right: Optional["CartNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def leaves(self) -> List["CartNode"]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


def _check_xy(X, y) -> Tuple[Array, Array]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"features {X.shape} and targets {y.shape} do not line up")
    if y.shape[0] == 0:
        raise DataError("cannot fit a tree on zero samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("features and targets must be finite")
    return X, y


def _best_split(X: Array, y: Array, features: Array, min_leaf: int) -> Optional[Tuple[int, float]]:
    """
    Lowest-SSE split over ``features`` using prefix sums. Candidate thresholds
    are midpoints between consecutive distinct sorted values; ties go to the
    lowest feature index, then the lowest threshold.
    """
    n = y.shape[0]
    left_n = np.arange(1, n, dtype=np.float64)
    right_n = n - left_n
    best: Optional[Tuple[float, int, float]] = None
    for f in np.sort(features):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        if not valid.any():
            continue
        csum, csq = np.cumsum(ys), np.cumsum(ys ** 2)
        left_sum, left_sq = csum[:-1], csq[:-1]
        right_sum, right_sq = csum[-1] - left_sum, csq[-1] - left_sq
        sse = (left_sq - left_sum ** 2 / left_n) + (right_sq - right_sum ** 2 / right_n)
        sse = np.where(valid, sse, np.inf)
        i = int(np.flatnonzero(sse <= sse.min() + SPLIT_TIE_TOLERANCE)[0])
        if best is None or sse[i] < best[0] - SPLIT_TIE_TOLERANCE:
            best = (float(sse[i]), int(f), 0.5 * (xs[i] + xs[i + 1]))
    return None if best is None else (best[1], best[2])


def cart_fit(X, y, config: RfConfig, rng: np.random.Generator) -> CartNode:
    """
    Greedy variance-reduction tree. A node is split while it is shallower
    than ``max_depth``, its targets are not constant and some candidate
    threshold leaves at least ``min_samples_leaf`` samples on each side.
    Each split considers a fresh random subset of the features.
    """
    X, y = _check_xy(X, y)
    n_features = X.shape[1]
    k = config.features_per_split(n_features) if n_features else 0

    def grow(idx: Array, depth: int) -> CartNode:
        ys = y[idx]
        node = CartNode(value=float(ys.mean()), n_samples=int(idx.shape[0]))
        if depth >= config.max_depth or idx.shape[0] < 2 * config.min_samples_leaf or np.ptp(ys) == 0.0 or k == 0:
            return node
        features = rng.choice(n_features, size=k, replace=False)
        split = _best_split(X[idx], ys, features, config.min_samples_leaf)
        if split is None:
            return node
        node.feature, node.threshold = split
        goes_left = X[idx, node.feature] <= node.threshold
        node.left = grow(idx[goes_left], depth + 1)
        node.right = grow(idx[~goes_left], depth + 1)
        return node

    return grow(np.arange(y.shape[0]), 0)


def cart_predict(node: CartNode, X) -> Array:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])

    def descend(current: CartNode, idx: Array):
        if current.is_leaf:
            out[idx] = current.value
            return
        goes_left = X[idx, current.feature] <= current.threshold
        descend(current.left, idx[goes_left])
        descend(current.right, idx[~goes_left])

    descend(node, np.arange(X.shape[0]))
    return out


@dataclass
class RegressionForest:
    config: RfConfig
    n_features: int
    trees: List[CartNode]

    def predict(self, X) -> Array:
        return rf_predict(self, X)


def _fit_tree(X: Array, y: Array, config: RfConfig, seed: np.random.SeedSequence) -> CartNode:
    rng = np.random.default_rng(seed)
    if config.bootstrap:
        sample = rng.integers(0, y.shape[0], size=y.shape[0])
        return cart_fit(X[sample], y[sample], config, rng)
    return cart_fit(X, y, config, rng)


def rf_fit(X, y, config: RfConfig, n_jobs: int = 1) -> RegressionForest:
    """
    ``n_trees`` CART trees on bootstrap resamples. Per-tree generators are
    spawned from ``config.seed`` so the fit does not depend on ``n_jobs``.
    """
    X, y = _check_xy(X, y)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    trees = Parallel(n_jobs=n_jobs)(delayed(_fit_tree)(X, y, config, seed) for seed in seeds)
    forest = RegressionForest(config, X.shape[1], list(trees))
    logger.debug("fitted %d CART trees on %d samples (n_jobs=%s)", config.n_trees, y.shape[0], n_jobs)
    return forest


def rf_predict(forest: RegressionForest, X) -> Array:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise DataError(f"forest was fitted on {forest.n_features} features, got {X.shape[1]}")
    return np.mean([cart_predict(tree, X) for tree in forest.trees], axis=0)


def fit_residual_model(predictions, targets, X, config: RfConfig, n_jobs: int = 1) -> RegressionForest:
    """
    Random forest regressing |y - f(x)| on the features of the proper
    training set; its predictions are the sigma of the RF-normalized score.
    """
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.shape != targets.shape:
        raise DataError(f"{predictions.shape[0]} predictions for {targets.shape[0]} targets")
    return rf_fit(X, np.abs(targets - predictions), config, n_jobs)


# ---------- Persistence ----------

def _node_to_list(node: CartNode, out: list):
    # preorder: a split node is followed by its whole left subtree, then its right one
    if node.is_leaf:
        out.append({"value": node.value, "n_samples": node.n_samples})
        return
    out.append({"value": node.value, "n_samples": node.n_samples, "feature": node.feature, "threshold": node.threshold})
    _node_to_list(node.left, out)
    _node_to_list(node.right, out)


def _node_from_list(entries: list, position: int) -> Tuple[CartNode, int]:
    entry = entries[position]
    node = CartNode(value=float(entry["value"]), n_samples=int(entry["n_samples"]))
    position += 1
    if entry.get("feature") is None:
        return node, position
    node.feature, node.threshold = int(entry["feature"]), float(entry["threshold"])
    node.left, position = _node_from_list(entries, position)
    node.right, position = _node_from_list(entries, position)
    return node, position


def rf_to_dict(forest: RegressionForest) -> dict:
    trees = []
    for tree in forest.trees:
        nodes: list = []
        _node_to_list(tree, nodes)
        trees.append(nodes)
    return {"format_version": FORMAT_VERSION, "config": forest.config.to_dict(), "n_features": forest.n_features, "trees": trees}


def rf_from_dict(payload: dict) -> RegressionForest:
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported random forest format {payload.get('format_version')!r}")
    trees = []
    for nodes in payload["trees"]:
        tree, end = _node_from_list(nodes, 0)
        if end != len(nodes):
            raise DataError("random forest payload has trailing nodes")
        trees.append(tree)
    return RegressionForest(RfConfig(**payload["config"]), int(payload["n_features"]), trees)
