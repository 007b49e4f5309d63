# app/learning/conformal.py
"""
Inductive conformal prediction for regression.

A point model is fitted on the proper training set; nonconformity scores on
a held-out calibration set give the quantile q_hat, which turns point
predictions on new samples into intervals. The plain score is the absolute
residual; the normalized score divides it by sigma + beta, where sigma
comes from an ``UncertaintyEstimator``.
"""
import abc
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np
import pandas as pd

from ..exceptions import DataError, EstimatorError
from .dataset import Dataset
from .drf import Forest, predict_distribution
from .nn import MlpModel, Mode, forward
from .rf import RegressionForest, rf_predict

logger = logging.getLogger(__name__)

MCD_PASSES = 50
# guards ceil() against products such as 11 * 0.8 landing just above 8.8
RANK_TOLERANCE = 1e-9

Array = np.ndarray


class QuantileMode(str, enum.Enum):
    FINITE_SAMPLE = "finite_sample"
    PLAIN = "plain"


class PointModel(Protocol):
    def predict(self, features) -> Array: ...


# ---------- Scores ----------

def score(prediction, target):
    """Absolute residual |target - prediction|."""
    return np.abs(np.asarray(target, dtype=np.float64) - np.asarray(prediction, dtype=np.float64))


def normalized_score(prediction, target, sigma, beta: float = 0.0):
    """|target - prediction| / (sigma + beta)."""
    denominator = np.asarray(sigma, dtype=np.float64) + beta
    if np.any(~(denominator > 0)):
        raise EstimatorError(
            f"sigma + beta must be positive for every calibration sample (beta={beta}); "
            "use beta > 0 or an estimator that never returns zero"
        )
    return score(prediction, target) / denominator


# ---------- Calibration ----------

def quantile_rank(m: int, alpha: float, mode: QuantileMode = QuantileMode.FINITE_SAMPLE) -> int:
    """1-based rank k of q_hat among m sorted scores (may exceed m)."""
    mode = QuantileMode(mode)
    level = (m + 1) * (1.0 - alpha) if mode is QuantileMode.FINITE_SAMPLE else m * (1.0 - alpha)
    return max(1, math.ceil(level - RANK_TOLERANCE))


@dataclass(frozen=True)
class Calibration:
    scores: Array
    alpha: float
    beta: float
    q_hat: float
    mode: QuantileMode

    @property
    def m(self) -> int:
        return int(self.scores.shape[0])

    @property
    def k(self) -> int:
        return quantile_rank(self.m, self.alpha, self.mode)

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.q_hat)

    def to_dict(self, include_scores: bool = True) -> dict:
        payload = {
            "alpha": self.alpha,
            "beta": self.beta,
            "mode": self.mode.value,
            "m": self.m,
            "k": self.k,
            # JSON has no infinity; an unbounded quantile is stored as null
            "q_hat": self.q_hat if self.bounded else None,
            "bounded": self.bounded,
        }
        if include_scores:
            payload["scores"] = self.scores.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "Calibration":
        return calibrate(payload["scores"], payload["alpha"], payload["mode"], payload.get("beta", 0.0))


def calibrate(scores, alpha: float, mode: QuantileMode = QuantileMode.FINITE_SAMPLE, beta: float = 0.0) -> Calibration:
    """
    q_hat is the k-th smallest score, k = ceil((m + 1)(1 - alpha)) in
    finite-sample mode and ceil(m (1 - alpha)) in plain mode. When k > m
    the quantile is +inf and every interval is unbounded.
    """
    mode = QuantileMode(mode)
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    if beta < 0:
        raise DataError(f"beta must be non-negative, got {beta}")
    values = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise DataError("calibration needs at least one score")
    if not np.all(np.isfinite(values)) or values[0] < 0:
        raise DataError("calibration scores must be finite and non-negative")
    values.setflags(write=False)

    k = quantile_rank(values.size, alpha, mode)
    if k > values.size:
        logger.warning(
            "calibration set of %d scores is too small for alpha=%.3g (rank %d); intervals are unbounded",
            values.size, alpha, k,
        )
        q_hat = math.inf
    else:
        q_hat = float(values[k - 1])
    return Calibration(values, float(alpha), float(beta), q_hat, mode)


# ---------- Intervals ----------

@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise DataError(f"interval lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def center(self) -> float:
        if not self.bounded:
            return math.nan
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)

    def contains(self, target: float) -> bool:
        return self.lower <= target <= self.upper


@dataclass(frozen=True)
class PredictionIntervals:
    """A batch of intervals stored column-wise; indexing yields ``PredictionInterval``."""

    lower: Array
    upper: Array
    center: Array

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or np.any(~(self.lower <= self.upper)):
            raise DataError("every interval needs lower <= upper")

    def __len__(self) -> int:
        return int(self.lower.shape[0])

    def __getitem__(self, index: int) -> PredictionInterval:
        return PredictionInterval(float(self.lower[index]), float(self.upper[index]))

    @property
    def width(self) -> Array:
        return self.upper - self.lower

    @property
    def bounded(self) -> Array:
        return np.isfinite(self.lower) & np.isfinite(self.upper)

    def covers(self, targets) -> Array:
        targets = np.asarray(targets, dtype=np.float64)
        return (self.lower <= targets) & (targets <= self.upper)


Intervals = Union[PredictionInterval, PredictionIntervals]


def _build(prediction, half_width) -> Intervals:
    prediction = np.asarray(prediction, dtype=np.float64)
    half_width = np.broadcast_to(np.asarray(half_width, dtype=np.float64), prediction.shape)
    lower, upper = prediction - half_width, prediction + half_width
    if prediction.ndim == 0:
        return PredictionInterval(float(lower), float(upper))
    return PredictionIntervals(lower, upper, prediction.copy())


def interval_constant(prediction, q_hat: float) -> Intervals:
    """[prediction - q_hat, prediction + q_hat]."""
    if q_hat < 0:
        raise DataError(f"q_hat must be non-negative, got {q_hat}")
    return _build(prediction, q_hat)


def interval_normalized(prediction, sigma, q_hat: float, beta: float = 0.0) -> Intervals:
    """[prediction -/+ q_hat (sigma + beta)]; an infinite q_hat is unbounded even where sigma + beta = 0."""
    if q_hat < 0:
        raise DataError(f"q_hat must be non-negative, got {q_hat}")
    scale = np.asarray(sigma, dtype=np.float64) + beta
    if np.any(scale < 0):
        raise DataError("sigma + beta must be non-negative")
    half_width = np.full(scale.shape, math.inf) if math.isinf(q_hat) else q_hat * scale
    return _build(prediction, half_width)


# ---------- Sigma sources ----------

def sigma_mcd(model: MlpModel, features, passes: int = MCD_PASSES, seed: int = 0) -> Array:
    """Population std of ``passes`` seeded forward passes with dropout active."""
    if model.config.dropout_prob <= 0:
        raise EstimatorError("MC dropout needs a network trained with dropout_prob > 0; every pass would be identical")
    if passes < 2:
        raise EstimatorError(f"MC dropout needs at least 2 passes, got {passes}")
    rng = np.random.default_rng(seed)
    draws = np.stack([forward(model, features, Mode.MC_DROPOUT, rng)[0][:, 0] for _ in range(passes)])
    return draws.std(axis=0)


def sigma_drf(forest: Forest, features, include_ensemble: bool = False) -> Array:
    """sqrt(forest variance), plus sqrt(ensemble variance) when ``include_ensemble``."""
    prediction = predict_distribution(forest, np.atleast_2d(features))
    if include_ensemble:
        return prediction.mixture_std + prediction.ensemble_std
    return prediction.mixture_std


class UncertaintyEstimator(abc.ABC):
    """Maps a feature matrix to per-sample sigma >= 0."""

    name: str = ""
    normalized: bool = True

    @abc.abstractmethod
    def _sigma(self, features: Array) -> Array:
        ...

    def sigma(self, features) -> Array:
        return self._checked(self._sigma(np.atleast_2d(np.asarray(features, dtype=np.float64))))

    def calibration_sigma(self, features) -> Array:
        """Sigma on the calibration set. Stochastic estimators override it to draw from their own stream."""
        return self.sigma(features)

    def _checked(self, values) -> Array:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise EstimatorError(f"{self.name} estimator produced sigma values that are negative or not finite")
        return values


class ConstantEstimator(UncertaintyEstimator):
    """Plain ICP: scores and intervals ignore sigma and beta."""

    name = "constant"
    normalized = False

    def _sigma(self, features):
        return np.ones(features.shape[0])


class McDropoutEstimator(UncertaintyEstimator):
    """Calibration and test sigma come from separate seeds, so row i of each set never shares dropout masks."""

    name = "mcd"

    def __init__(self, model: MlpModel, passes: int = MCD_PASSES, seed: int = 0, calibration_seed: Optional[int] = None):
        self.model = model
        self.passes = passes
        self.seed = seed
        self.calibration_seed = seed + 1 if calibration_seed is None else calibration_seed
        if self.calibration_seed == self.seed:
            raise EstimatorError("calibration and test dropout streams need different seeds")

    def _sigma(self, features):
        return sigma_mcd(self.model, features, self.passes, self.seed)

    def calibration_sigma(self, features) -> Array:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return self._checked(sigma_mcd(self.model, features, self.passes, self.calibration_seed))


class ResidualForestEstimator(UncertaintyEstimator):
    name = "rf_residual"

    def __init__(self, forest: RegressionForest):
        self.forest = forest

    def _sigma(self, features):
        return rf_predict(self.forest, features)


class DrfStdEstimator(UncertaintyEstimator):
    def __init__(self, forest: Forest, include_ensemble: bool = False):
        self.forest = forest
        self.include_ensemble = include_ensemble
        self.name = "drf_std_plus_ensemble" if include_ensemble else "drf_std"

    def _sigma(self, features):
        return sigma_drf(self.forest, features, self.include_ensemble)


class OracleEstimator(UncertaintyEstimator):
    """Sigma from a known function of the features, e.g. the true noise std of synthetic data."""

    name = "oracle"

    def __init__(self, noise_std):
        self.noise_std = noise_std

    def _sigma(self, features):
        return self.noise_std(features)


# ---------- ICP ----------

@dataclass(frozen=True)
class IcpResult:
    ids: list
    predictions: Array
    sigma: Array
    intervals: PredictionIntervals
    calibration: Calibration
    targets: Optional[Array] = None

    def covered(self) -> Array:
        if self.targets is None:
            raise DataError("coverage needs test targets")
        return self.intervals.covers(self.targets)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "id": self.ids,
            "prediction": self.predictions,
            "sigma": self.sigma,
            "lower": self.intervals.lower,
            "upper": self.intervals.upper,
        })
        if self.targets is not None:
            frame["target"] = self.targets
            frame["covered"] = self.covered().astype(int)
        return frame

    def plot_frame(self) -> pd.DataFrame:
        """Rows ordered by prediction, for drawing intervals against sorted predictions."""
        frame = self.to_frame().sort_values("prediction", kind="mergesort").reset_index(drop=True)
        frame.insert(0, "rank", np.arange(len(frame)))
        return frame


def run_icp(
    point_model: PointModel,
    estimator: UncertaintyEstimator,
    cal_set: Dataset,
    test_set: Dataset,
    alpha: float,
    beta: float = 0.0,
    mode: QuantileMode = QuantileMode.FINITE_SAMPLE,
) -> IcpResult:
    """
    Calibrates on ``cal_set`` and builds intervals on ``test_set``. The
    estimator gives calibration sigma through ``calibration_sigma`` and test
    sigma through ``sigma``. A non-normalized
    estimator takes the plain-score path, where beta plays no part.
    """
    if cal_set.n_samples == 0:
        raise DataError("calibration set is empty")
    cal_pred = np.asarray(point_model.predict(cal_set.features), dtype=np.float64).reshape(-1)
    test_pred = np.asarray(point_model.predict(test_set.features), dtype=np.float64).reshape(-1)
    test_sigma = estimator.sigma(test_set.features)

    if estimator.normalized:
        cal_sigma = estimator.calibration_sigma(cal_set.features)
        scores = normalized_score(cal_pred, cal_set.targets, cal_sigma, beta)
        calibration = calibrate(scores, alpha, mode, beta)
        intervals = interval_normalized(test_pred, test_sigma, calibration.q_hat, beta)
    else:
        calibration = calibrate(score(cal_pred, cal_set.targets), alpha, mode, 0.0)
        intervals = interval_constant(test_pred, calibration.q_hat)

    logger.debug(
        "%s icp: m=%d alpha=%.3g q_hat=%s", estimator.name, calibration.m, alpha, calibration.q_hat,
    )
    return IcpResult(test_set.sample_ids(), test_pred, test_sigma, intervals, calibration, np.asarray(test_set.targets))


def write_intervals_csv(result: IcpResult, path: Union[str, Path]) -> Path:
    """Columns id, prediction, sigma, lower, upper[, target, covered]."""
    path = Path(path)
    result.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path
