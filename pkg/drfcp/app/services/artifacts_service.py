# app/services/artifacts_service.py
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, DataError, MissingArtifact

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def canonical_json(payload) -> str:
    """Sorted keys, 2-space indent, shortest round-trip floats, no NaN/inf."""
    try:
        return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False, default=_plain) + "\n"
    except ValueError as ex:
        raise DataError(f"artifact contains a non-finite number: {ex}") from ex


class ArtifactsService:
    """
    Reads and writes everything under one run directory. Paths handed in
    and out are relative to ``root`` so manifests stay relocatable.
    """

    MANIFEST = "manifest.json"
    CONFIG = "config.json"
    AGGREGATE = "aggregate.json"

    def __init__(self, root: PathLike):
        self.root = Path(root)

    # ---------- Layout ----------

    def ensure_root(self) -> Path:
        if self.root.is_dir():
            return self.root
        if not self.root.parent.is_dir():
            raise ConfigError(f"cannot create output directory {self.root}: parent {self.root.parent} does not exist")
        try:
            self.root.mkdir()
        except OSError as ex:
            raise ConfigError(f"cannot create output directory {self.root}: {ex}") from ex
        logger.info("created output directory %s", self.root)
        return self.root

    @staticmethod
    def partition_dir(partition: int) -> str:
        return f"partition_{partition}"

    def model_path(self, partition: int, name: str) -> str:
        return f"{self.partition_dir(partition)}/{name}.json"

    def history_path(self, partition: int, name: str) -> str:
        return f"{self.partition_dir(partition)}/history_{name}.json"

    def split_path(self, partition: int, part: str) -> str:
        return f"{self.partition_dir(partition)}/{part}.csv"

    @staticmethod
    def cell_name(method: str, cl: float) -> str:
        return f"{method}_cl{round(cl * 100):02d}"

    def calibration_path(self, partition: int, method: str, cl: float) -> str:
        return f"{self.partition_dir(partition)}/calibration_{self.cell_name(method, cl)}.json"

    def reports_path(self, partition: int) -> str:
        return f"{self.partition_dir(partition)}/reports.json"

    def intervals_path(self, partition: int, method: str, cl: float) -> str:
        return f"{self.partition_dir(partition)}/intervals_{self.cell_name(method, cl)}.csv"

    def plot_path(self, partition: int, method: str, cl: float) -> str:
        return f"{self.partition_dir(partition)}/plot_{self.cell_name(method, cl)}.csv"

    def resolve(self, relative: PathLike) -> Path:
        return self.root / relative

    def exists(self, relative: PathLike) -> bool:
        return self.resolve(relative).is_file()

    # ---------- IO ----------

    def prepare(self, relative: PathLike) -> Path:
        self.ensure_root()
        path = self.resolve(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, relative: PathLike, payload) -> Path:
        path = self.prepare(relative)
        path.write_text(canonical_json(payload), encoding="utf-8")
        logger.debug("wrote %s", path)
        return path

    def read_json(self, relative: PathLike):
        path = self.resolve(relative)
        if not path.is_file():
            raise MissingArtifact(f"missing artifact {path}; run the step that produces it first")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as ex:
            raise DataError(f"{path} is not valid JSON: {ex}") from ex

    def write_frame(self, relative: PathLike, frame: pd.DataFrame) -> Path:
        path = self.prepare(relative)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.debug("wrote %s (%d rows)", path, len(frame))
        return path

    def read_frame(self, relative: PathLike) -> pd.DataFrame:
        path = self.resolve(relative)
        if not path.is_file():
            raise MissingArtifact(f"missing artifact {path}; run the step that produces it first")
        return pd.read_csv(path)
