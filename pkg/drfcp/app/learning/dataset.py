# app/learning/dataset.py
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from ..exceptions import DataError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
FRACTION_TOLERANCE = 1e-9


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """
    Feature matrix plus target vector. Arrays are copied and made read-only
    on construction, so instances can be shared between threads.
    """

    features: np.ndarray
    targets: np.ndarray
    ids: Optional[Tuple[str, ...]] = None
    feature_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if features.ndim == 1:
            features = features.reshape(-1, 1) if features.size else features.reshape(len(targets), 0)
        if features.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got {features.ndim} dimensions")
        if features.shape[0] != targets.shape[0]:
            raise DataError(
                f"features have {features.shape[0]} rows but targets have {targets.shape[0]} entries"
            )
        if not np.all(np.isfinite(features)):
            raise DataError("features contain NaN or infinite values")
        if not np.all(np.isfinite(targets)):
            raise DataError("targets contain NaN or infinite values")
        if self.ids is not None and len(self.ids) != targets.shape[0]:
            raise DataError(f"{len(self.ids)} ids given for {targets.shape[0]} samples")
        if self.feature_names is not None and len(self.feature_names) != features.shape[1]:
            raise DataError(f"{len(self.feature_names)} feature names given for {features.shape[1]} columns")

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "targets", _frozen(targets))
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(str(n) for n in self.feature_names))

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_samples(self) -> int:
        return self.targets.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def sample_ids(self) -> Tuple[str, ...]:
        if self.ids is not None:
            return self.ids
        return tuple(str(i) for i in range(self.n_samples))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        ids = tuple(self.ids[i] for i in indices) if self.ids is not None else None
        return Dataset(self.features[indices], self.targets[indices], ids=ids, feature_names=self.feature_names)

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.targets, ids=self.ids, feature_names=self.feature_names)

    def to_frame(self, target_column: str = "y") -> pd.DataFrame:
        names = self.feature_names or tuple(f"x{i + 1}" for i in range(self.n_features))
        frame = pd.DataFrame(self.features, columns=list(names))
        frame.insert(0, "id", list(self.sample_ids()))
        frame[target_column] = self.targets
        return frame


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    cal_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    n_partitions: int = 5

    def __post_init__(self):
        fractions = (self.train_fraction, self.cal_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fractions):
            raise DataError(f"split fractions must lie in (0, 1), got {fractions}")
        if abs(sum(fractions) - 1.0) > FRACTION_TOLERANCE:
            raise DataError(f"split fractions must sum to 1, got {sum(fractions)!r}")
        if self.n_partitions < 1:
            raise DataError("n_partitions must be a positive integer")

    def sizes(self, n_samples: int) -> Tuple[int, int, int]:
        """(train, cal, test) sizes; flooring remainders go to train."""
        n_cal = math.floor(n_samples * self.cal_fraction + FRACTION_TOLERANCE)
        n_test = math.floor(n_samples * self.test_fraction + FRACTION_TOLERANCE)
        return n_samples - n_cal - n_test, n_cal, n_test

    def partition_seed(self, partition_index: int) -> int:
        return self.seed + partition_index


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)))

    def transform(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.shape[0]:
            raise DataError(f"standardizer fitted on {self.mean.shape[0]} columns, got {features.shape[-1]}")
        return (features - self.mean) / self.std

    def inverse_transform(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Standardizer":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64), std=np.asarray(payload["std"], dtype=np.float64))


# ---------- Loading ----------

def _parse_numeric_frame(frame: pd.DataFrame, source: str) -> pd.DataFrame:
    """Convert string cells to float, naming the first offending cell."""
    parsed = {}
    for column in frame.columns:
        values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            cell = frame[column].iloc[row]
            raise DataError(
                f"{source}: non-numeric or missing value {cell!r} at row {row + 1}, column {column!r}"
            )
        parsed[column] = values.astype(np.float64)
    return pd.DataFrame(parsed, index=frame.index)


def _read_text_table(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as ex:
        raise DataError(f"{path}: file is empty") from ex
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    return frame


def load_csv(path, target_column: str, id_column: Optional[str] = None) -> Dataset:
    """
    Read a UTF-8, comma-separated file with a header row. Every column other
    than the target (and the optional id column) becomes a feature, in header
    order.
    """
    frame = _read_text_table(path)
    if target_column not in frame.columns:
        raise DataError(f"{path}: missing target column {target_column!r}")
    ids = None
    if id_column is not None:
        if id_column not in frame.columns:
            raise DataError(f"{path}: missing id column {id_column!r}")
        ids = tuple(frame.pop(id_column))

    numeric = _parse_numeric_frame(frame, str(path))
    feature_columns = [c for c in numeric.columns if c != target_column]
    if not feature_columns:
        logger.warning("%s holds only the target column; dataset has zero features", path)

    features = numeric[feature_columns].to_numpy(dtype=np.float64).reshape(len(numeric), len(feature_columns))
    logger.info("Loaded %s: %d samples, %d features", path, features.shape[0], features.shape[1])
    return Dataset(features, numeric[target_column].to_numpy(), ids=ids, feature_names=tuple(feature_columns))


def load_keyed_table(path) -> pd.DataFrame:
    """Read a join table whose first column is the key; values must be numeric."""
    frame = _read_text_table(path)
    key_column = frame.columns[0]
    keys = frame.pop(key_column).str.strip()
    numeric = _parse_numeric_frame(frame, str(path))
    numeric.index = pd.Index(keys, name=key_column)
    return numeric


def load_responses(path) -> pd.DataFrame:
    """Read a (drug_key, cell_key, y) table; the first three columns are used."""
    frame = _read_text_table(path)
    if frame.shape[1] < 3:
        raise DataError(f"{path}: expected drug key, cell key and response columns")
    drug_col, cell_col, y_col = frame.columns[:3]
    responses = _parse_numeric_frame(frame[[y_col]], str(path))
    return pd.DataFrame({
        "drug": frame[drug_col].str.strip(),
        "cell": frame[cell_col].str.strip(),
        "y": responses[y_col],
    })


def join_drug_cell(drug_features: pd.DataFrame, cell_features: pd.DataFrame, responses: pd.DataFrame) -> Dataset:
    """
    One row per response; the drug descriptor vector comes first, then the
    cell-line expression vector.
    """
    for name, table in (("drug", drug_features), ("cell", cell_features)):
        duplicated = table.index[table.index.duplicated()]
        if len(duplicated):
            raise DataError(f"duplicate key {duplicated[0]!r} in {name} feature table")

    drug_keys = responses.iloc[:, 0].astype(str).tolist()
    cell_keys = responses.iloc[:, 1].astype(str).tolist()
    targets = responses.iloc[:, 2].to_numpy(dtype=np.float64)

    known_drugs = set(drug_features.index)
    known_cells = set(cell_features.index)
    for row, (drug, cell) in enumerate(zip(drug_keys, cell_keys)):
        if drug not in known_drugs:
            raise DataError(f"response row {row + 1} references unknown drug key {drug!r}")
        if cell not in known_cells:
            raise DataError(f"response row {row + 1} references unknown cell key {cell!r}")

    features = np.hstack([
        drug_features.loc[drug_keys].to_numpy(dtype=np.float64),
        cell_features.loc[cell_keys].to_numpy(dtype=np.float64),
    ])
    names = [f"drug:{c}" for c in drug_features.columns] + [f"cell:{c}" for c in cell_features.columns]
    ids = [f"{d}|{c}" for d, c in zip(drug_keys, cell_keys)]
    logger.info(
        "Joined %d responses: %d drug + %d cell features",
        len(targets), drug_features.shape[1], cell_features.shape[1],
    )
    return Dataset(features, targets, ids=tuple(ids), feature_names=tuple(names))


# ---------- Partitioning ----------

def partition_indices(n_samples: int, spec: SplitSpec, partition_index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0 <= partition_index < spec.n_partitions:
        raise DataError(f"partition index {partition_index} outside [0, {spec.n_partitions})")
    if n_samples < 1:
        raise DataError("cannot split an empty dataset")
    n_train, n_cal, n_test = spec.sizes(n_samples)
    if min(n_train, n_cal, n_test) < 1:
        raise DataError(
            f"{n_samples} samples give an empty split at fractions "
            f"({spec.train_fraction}, {spec.cal_fraction}, {spec.test_fraction})"
        )
    rng = np.random.default_rng(spec.partition_seed(partition_index))
    order = rng.permutation(n_samples)
    return order[:n_train], order[n_train:n_train + n_cal], order[n_train + n_cal:]


def split(ds: Dataset, spec: SplitSpec, partition_index: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, cal, test) partition for ``spec.seed + partition_index``."""
    train_idx, cal_idx, test_idx = partition_indices(ds.n_samples, spec, partition_index)
    return ds.subset(train_idx), ds.subset(cal_idx), ds.subset(test_idx)


# ---------- Standardization ----------

def fit_standardizer(train: Dataset) -> Standardizer:
    if train.n_samples < 1:
        raise DataError("cannot fit a standardizer on an empty dataset")
    features = train.features
    constant = np.ptp(features, axis=0) == 0
    # constant columns are centred on their exact value so they map to 0
    mean = np.where(constant, features[0], features.mean(axis=0))
    std = features.std(axis=0)
    return Standardizer(mean=mean, std=std)


def apply_standardizer(standardizer: Standardizer, ds: Dataset) -> Dataset:
    return ds.with_features(standardizer.transform(ds.features))


# ---------- Synthetic data ----------

SYNTH_INFORMATIVE = 2
SYNTH_NOISE_FEATURES = 8


def synthetic_mean(features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return 2.0 * np.sin(features[:, 0]) + features[:, 1]


def synthetic_noise_std(features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return 0.1 + 0.4 * features[:, 1]


def synth_heteroskedastic(n: int, seed: int, noise_features: int = SYNTH_NOISE_FEATURES) -> Dataset:
    """
    x ~ U[0, 4]^(2 + noise_features); y = 2 sin(x1) + x2 + eps with
    eps ~ N(0, (0.1 + 0.4 x2)^2). Only x1 and x2 carry signal.
    """
    if n < 1:
        raise DataError(f"synthetic dataset needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    features = rng.uniform(0.0, 4.0, size=(n, SYNTH_INFORMATIVE + noise_features))
    targets = synthetic_mean(features) + rng.normal(0.0, 1.0, size=n) * synthetic_noise_std(features)
    names = tuple(f"x{i + 1}" for i in range(features.shape[1]))
    return Dataset(features, targets, ids=tuple(f"s{i}" for i in range(n)), feature_names=names)
