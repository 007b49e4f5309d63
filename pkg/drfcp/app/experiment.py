# app/experiment.py
"""
Experiment-level value types: the validated run configuration, the method
catalogue and the run manifest.
"""
import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .learning.conformal import QuantileMode
from .learning.dataset import SplitSpec
from .learning.drf import DrfConfig
from .learning.metrics import BinSpec
from .learning.nn import MlpConfig, TrainSchedule
from .learning.rf import RfConfig

MANIFEST_VERSION = "drfcp.manifest/1"

# stream tags mixed into the partition seed, one per seeded component
SEED_TAGS = {"ann": 1, "drf": 2, "rf": 3, "mcd_cal": 4, "mcd_test": 5}


class Method(str, enum.Enum):
    ANN_CP = "ann_cp"
    ANN_MCD = "ann_mcd"
    ANN_RF = "ann_rf"
    DRF_STD = "drf_std"
    DRF_STD_ENS = "drf_std_ens"

    @property
    def needs_ann(self) -> bool:
        return self in (Method.ANN_CP, Method.ANN_MCD, Method.ANN_RF)

    @property
    def needs_drf(self) -> bool:
        return self in (Method.DRF_STD, Method.DRF_STD_ENS)

    @property
    def needs_rf(self) -> bool:
        return self is Method.ANN_RF

    @property
    def label(self) -> str:
        return METHOD_LABELS[self]


METHOD_LABELS = {
    Method.ANN_CP: "ANN CP",
    Method.ANN_MCD: "ANN MCD",
    Method.ANN_RF: "ANN RF",
    Method.DRF_STD: "DRF STD",
    Method.DRF_STD_ENS: "DRF STD + Ensemble STD",
}
METHOD_ORDER = [m.value for m in Method]


def derive_seed(partition_seed: int, tag: str) -> int:
    """Independent 32-bit seed for one component of one partition."""
    return int(np.random.SeedSequence([partition_seed, SEED_TAGS[tag]]).generate_state(1)[0])


@dataclass(frozen=True)
class DataSource:
    kind: str = "synthetic"
    n_samples: int = 1000
    noise_features: int = 8
    path: Optional[str] = None
    target_column: str = "y"
    id_column: Optional[str] = None
    drug_features: Optional[str] = None
    cell_features: Optional[str] = None
    responses: Optional[str] = None

    @property
    def is_synthetic(self) -> bool:
        return self.kind == "synthetic"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource
    split: SplitSpec
    ann: MlpConfig
    drf: DrfConfig
    rf: RfConfig
    schedule: TrainSchedule
    bins: BinSpec
    methods: Tuple[Method, ...]
    confidence_levels: Tuple[float, ...]
    beta: float = 0.0
    quantile_mode: QuantileMode = QuantileMode.FINITE_SAMPLE
    mcd_passes: int = 50
    standardize: bool = True
    preset: str = "desk"
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def needs_ann(self) -> bool:
        return any(m.needs_ann for m in self.methods)

    @property
    def needs_drf(self) -> bool:
        return any(m.needs_drf for m in self.methods)

    @property
    def needs_rf(self) -> bool:
        return any(m.needs_rf for m in self.methods)

    @property
    def partitions(self) -> List[int]:
        return list(range(self.split.n_partitions))

    def partition_seed(self, partition: int) -> int:
        return self.split.partition_seed(partition)

    def ann_for(self, partition: int) -> MlpConfig:
        return replace(self.ann, seed=derive_seed(self.partition_seed(partition), "ann"))

    def drf_for(self, partition: int) -> DrfConfig:
        return replace(self.drf, seed=derive_seed(self.partition_seed(partition), "drf"))

    def rf_for(self, partition: int) -> RfConfig:
        return replace(self.rf, seed=derive_seed(self.partition_seed(partition), "rf"))

    def mcd_seeds(self, partition: int) -> Tuple[int, int]:
        """(calibration, test) dropout seeds."""
        seed = self.partition_seed(partition)
        return derive_seed(seed, "mcd_cal"), derive_seed(seed, "mcd_test")

    def to_dict(self) -> dict:
        """Payload accepted back by ``ExperimentConfigSerializer``."""
        return {
            "preset": self.preset,
            "data": {k: v for k, v in vars(self.data).items() if v is not None},
            "split": {
                "train_fraction": self.split.train_fraction,
                "cal_fraction": self.split.cal_fraction,
                "test_fraction": self.split.test_fraction,
                "n_partitions": self.split.n_partitions,
            },
            "ann": {
                "hidden_layers": list(self.ann.layer_sizes[:-1]),
                "dropout_prob": self.ann.dropout_prob,
                "use_batchnorm": self.ann.use_batchnorm,
                "learning_rate": self.ann.learning_rate,
                "batch_size": self.ann.batch_size,
                "activation": self.ann.activation,
            },
            "drf": {
                "n_trees": self.drf.n_trees,
                "depth": self.drf.depth,
                "hidden_layers": list(self.drf.hidden_layers),
                "routing_width": self.drf.routing_width,
                "use_batchnorm": self.drf.use_batchnorm,
                "dropout_prob": self.drf.dropout_prob,
                "learning_rate": self.drf.learning_rate,
                "batch_size": self.drf.batch_size,
                "leaf_iterations": self.drf.leaf_iterations,
                "activation": self.drf.activation,
            },
            "rf": {k: v for k, v in self.rf.to_dict().items() if k != "seed"},
            "schedule": vars(self.schedule).copy(),
            "bins": self.bins.to_dict(),
            "methods": [m.value for m in self.methods],
            "confidence_levels": list(self.confidence_levels),
            "beta": self.beta,
            "quantile_mode": self.quantile_mode.value,
            "mcd_passes": self.mcd_passes,
            "standardize": self.standardize,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        """sha256 over everything that influences results (the output directory does not)."""
        payload = self.to_dict()
        payload.pop("output_dir")
        encoded = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    partition_seeds: List[int]
    models: Dict[str, Dict[str, str]] = field(default_factory=dict)
    reports: List[str] = field(default_factory=list)
    timestamps: Dict[str, str] = field(default_factory=dict)
    format_version: str = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config_hash": self.config_hash,
            "partition_seeds": list(self.partition_seeds),
            "models": self.models,
            "reports": sorted(set(self.reports)),
            "timestamps": self.timestamps,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RunManifest":
        return cls(
            config_hash=payload["config_hash"],
            partition_seeds=list(payload["partition_seeds"]),
            models=dict(payload.get("models", {})),
            reports=list(payload.get("reports", [])),
            timestamps=dict(payload.get("timestamps", {})),
            format_version=payload.get("format_version", MANIFEST_VERSION),
        )
