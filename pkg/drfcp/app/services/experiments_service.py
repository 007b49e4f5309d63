# app/services/experiments_service.py
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import pandas as pd
from django.conf import settings
from django.utils import timezone

from ..exceptions import ConfigError, DrfcpError, TrainingDivergence
from ..experiment import METHOD_ORDER, ExperimentConfig, Method, RunManifest
from ..learning import conformal, drf, nn, rf
from ..learning.conformal import IcpResult, UncertaintyEstimator
from ..learning.dataset import (
    Dataset,
    Standardizer,
    apply_standardizer,
    fit_standardizer,
    join_drug_cell,
    load_csv,
    load_keyed_table,
    load_responses,
    split,
    synth_heteroskedastic,
)
from ..learning.metrics import EvaluationReport, aggregate_reports, evaluate, report_tables
from ..serializers.config_serializers import ExperimentConfigSerializer
from .artifacts_service import ArtifactsService
from .runs_service import RunsService

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionData:
    train: Dataset
    cal: Dataset
    test: Dataset
    standardizer: Optional[Standardizer] = None


class ExperimentsService:
    """
    Runs the experiment protocol for one config: data preparation, model
    training per partition, conformal calibration and evaluation, reports.
    Per-partition work is dispatched as Celery tasks; everything is written
    through ``ArtifactsService`` and recorded through ``RunsService``.
    """

    def __init__(self, config: ExperimentConfig, output_dir: Optional[str] = None, threads: Optional[int] = None, runs: Optional[RunsService] = None):
        overrides = getattr(settings, "DRFCP", {})
        self.config = config
        self.output_dir = str(output_dir or overrides.get("OUTPUT_DIR") or config.output_dir)
        self.threads = int(threads or overrides.get("THREADS") or 1)
        self.artifacts = ArtifactsService(self.output_dir)
        self.runs = runs or RunsService()
        self._dataset: Optional[Dataset] = None
        self._partitions: Dict[int, PartitionData] = {}

    @classmethod
    def from_payload(cls, payload: dict, output_dir: Optional[str] = None) -> "ExperimentsService":
        serializer = ExperimentConfigSerializer(data=payload)
        serializer.is_valid(raise_exception=True)
        return cls(serializer.save(), output_dir)

    # ---------- Data ----------

    def load_dataset(self) -> Dataset:
        if self._dataset is None:
            source = self.config.data
            if source.kind == "synthetic":
                self._dataset = synth_heteroskedastic(source.n_samples, self.config.seed, source.noise_features)
            elif source.kind == "csv":
                self._dataset = load_csv(source.path, source.target_column, source.id_column)
            else:
                self._dataset = join_drug_cell(
                    load_keyed_table(source.drug_features),
                    load_keyed_table(source.cell_features),
                    load_responses(source.responses),
                )
            logger.info("loaded %d samples with %d features (%s)", self._dataset.n_samples, self._dataset.n_features, source.kind)
        return self._dataset

    def partition_data(self, partition: int) -> PartitionData:
        """Seeded split; features standardized with statistics of the proper training set."""
        if partition not in self._partitions:
            train, cal, test = split(self.load_dataset(), self.config.split, partition)
            standardizer = None
            if self.config.standardize:
                standardizer = fit_standardizer(train)
                train, cal, test = (apply_standardizer(standardizer, ds) for ds in (train, cal, test))
            self._partitions[partition] = PartitionData(train, cal, test, standardizer)
        return self._partitions[partition]

    def _check_partitions(self, partitions: Optional[Iterable[int]]) -> List[int]:
        if partitions is None:
            return self.config.partitions
        partitions = sorted(set(partitions))
        for p in partitions:
            if not 0 <= p < self.config.split.n_partitions:
                raise ConfigError(f"partition {p} is out of range for {self.config.split.n_partitions} partitions")
        return partitions

    def _check_cells(self, methods: Optional[Iterable], cls: Optional[Iterable[float]]) -> Tuple[List[Method], List[float]]:
        chosen = [Method(m) for m in methods] if methods else list(self.config.methods)
        outside = [m.value for m in chosen if m not in self.config.methods]
        if outside:
            raise ConfigError(f"methods {outside} are not in the config's method list, so their models were never trained")
        levels = list(cls) if cls is not None else list(self.config.confidence_levels)
        if not levels:
            raise ConfigError("no confidence levels requested")
        if any(not 0.0 < cl < 1.0 for cl in levels):
            raise ConfigError(f"confidence levels must lie in (0, 1), got {levels}")
        return chosen, sorted(levels)

    # ---------- Manifest ----------

    def payload(self) -> dict:
        return self.config.to_dict()

    def load_manifest(self) -> RunManifest:
        if self.artifacts.exists(ArtifactsService.MANIFEST):
            manifest = RunManifest.from_dict(self.artifacts.read_json(ArtifactsService.MANIFEST))
            if manifest.config_hash != self.config.config_hash():
                logger.warning("%s was produced with a different config; manifest hash updated", self.output_dir)
                manifest.config_hash = self.config.config_hash()
            return manifest
        return RunManifest(
            config_hash=self.config.config_hash(),
            partition_seeds=[self.config.partition_seed(p) for p in self.config.partitions],
        )

    def save_manifest(self, manifest: RunManifest) -> Path:
        now = timezone.now().isoformat()
        manifest.timestamps.setdefault("created", now)
        manifest.timestamps["updated"] = now
        return self.artifacts.write_json(ArtifactsService.MANIFEST, manifest.to_dict())

    # ---------- synth ----------

    def synthesize(self) -> List[Path]:
        """Writes train/cal/test CSVs (raw features) for every partition plus the manifest."""
        if not self.config.data.is_synthetic:
            raise ConfigError("synth needs a synthetic data source")
        self.artifacts.ensure_root()
        dataset = self.load_dataset()
        written = []
        for p in self.config.partitions:
            for part, ds in zip(("train", "cal", "test"), split(dataset, self.config.split, p)):
                written.append(self.artifacts.write_frame(self.artifacts.split_path(p, part), ds.to_frame()))
        self.save_manifest(self.load_manifest())
        logger.info("wrote %d split files to %s", len(written), self.output_dir)
        return written

    # ---------- train ----------

    def train(self, partitions: Optional[Iterable[int]] = None) -> RunManifest:
        from ..tasks import train_partition_task

        partitions = self._check_partitions(partitions)
        self.artifacts.ensure_root()
        run = self.runs.record_run(self.config, self.output_dir)
        self.artifacts.write_json(ArtifactsService.CONFIG, self.payload())
        try:
            jobs = [train_partition_task.delay(self.payload(), self.output_dir, p) for p in partitions]
            results = [job.get() for job in jobs]
        except DrfcpError as ex:
            self.runs.mark(run, "failed", str(ex))
            raise

        manifest = self.load_manifest()
        for p, paths in zip(partitions, results):
            manifest.models[self.artifacts.partition_dir(p)] = paths
        self.save_manifest(manifest)
        self.runs.mark(run, "trained")
        return manifest

    def _fit(self, name: str, partition: int, fit: Callable):
        try:
            model, history = fit()
        except TrainingDivergence as ex:
            if ex.history is not None:
                self.artifacts.write_json(self.artifacts.history_path(partition, name), ex.history.to_dict())
            raise
        self.artifacts.write_json(self.artifacts.history_path(partition, name), history.to_dict())
        logger.info(
            "partition %d: %s trained, best epoch %s (validation loss %.6g)",
            partition, name, history.best_epoch, history.best_val_loss,
        )
        return model

    def train_partition(self, partition: int) -> Dict[str, str]:
        """Trains only the models the method list needs; returns their relative paths."""
        config = self.config
        data = self.partition_data(partition)
        n_features = data.train.n_features
        paths: Dict[str, str] = {}
        if data.standardizer is not None:
            paths["standardizer"] = self.artifacts.model_path(partition, "standardizer")
            self.artifacts.write_json(paths["standardizer"], data.standardizer.to_dict())

        if config.needs_ann:
            ann = self._fit("ann", partition, lambda: nn.train(
                nn.MlpModel.initialize(config.ann_for(partition), n_features), data.train, data.cal, config.schedule,
            ))
            paths["ann"] = self.artifacts.model_path(partition, "ann")
            self.artifacts.write_json(paths["ann"], nn.model_to_dict(ann))
            if config.needs_rf:
                residual_model = rf.fit_residual_model(
                    ann.predict(data.train.features), data.train.targets, data.train.features,
                    config.rf_for(partition), self.threads,
                )
                paths["rf"] = self.artifacts.model_path(partition, "rf")
                self.artifacts.write_json(paths["rf"], rf.rf_to_dict(residual_model))

        if config.needs_drf:
            drf_config = config.drf_for(partition)
            forest = self._fit("drf", partition, lambda: drf.train_drf(
                drf.build_forest(drf_config, n_features, data.train.targets),
                data.train, data.cal, config.schedule, drf_config.leaf_iterations,
            ))
            paths["drf"] = self.artifacts.model_path(partition, "drf")
            self.artifacts.write_json(paths["drf"], drf.forest_to_dict(forest))
        return paths

    # ---------- calibrate / intervals ----------

    def _model(self, cache: dict, partition: int, name: str):
        if name not in cache:
            payload = self.artifacts.read_json(self.artifacts.model_path(partition, name))
            loader = {"ann": nn.model_from_dict, "rf": rf.rf_from_dict, "drf": drf.forest_from_dict}[name]
            cache[name] = loader(payload)
        return cache[name]

    def estimator_for(self, method: Method, partition: int, cache: Optional[dict] = None) -> Tuple[conformal.PointModel, UncertaintyEstimator]:
        """(point model, sigma source) of one method, loading only the models it needs."""
        cache = {} if cache is None else cache
        if method.needs_drf:
            forest = self._model(cache, partition, "drf")
            return forest, conformal.DrfStdEstimator(forest, include_ensemble=method is Method.DRF_STD_ENS)
        ann = self._model(cache, partition, "ann")
        if method is Method.ANN_MCD:
            calibration_seed, test_seed = self.config.mcd_seeds(partition)
            return ann, conformal.McDropoutEstimator(ann, self.config.mcd_passes, test_seed, calibration_seed)
        if method is Method.ANN_RF:
            return ann, conformal.ResidualForestEstimator(self._model(cache, partition, "rf"))
        return ann, conformal.ConstantEstimator()

    def run_cell(self, partition: int, method: Method, cl: float, cache: Optional[dict] = None) -> IcpResult:
        data = self.partition_data(partition)
        point_model, estimator = self.estimator_for(method, partition, cache)
        return conformal.run_icp(
            point_model, estimator, data.cal, data.test,
            alpha=1.0 - cl, beta=self.config.beta, mode=self.config.quantile_mode,
        )

    def calibrate(self, partition: int, method, cl: float) -> conformal.Calibration:
        method = Method(method)
        self._check_cells([method], [cl])
        calibration = self.run_cell(self._check_partitions([partition])[0], method, cl).calibration
        self.artifacts.write_json(self.artifacts.calibration_path(partition, method.value, cl), calibration.to_dict())
        return calibration

    def intervals(self, partition: int, method, cl: float) -> Tuple[Path, Path]:
        """Per-sample interval CSV plus the same rows ordered by prediction."""
        method = Method(method)
        self._check_cells([method], [cl])
        result = self.run_cell(self._check_partitions([partition])[0], method, cl)
        csv_path = conformal.write_intervals_csv(result, self.artifacts.prepare(self.artifacts.intervals_path(partition, method.value, cl)))
        plot_path = self.artifacts.write_frame(self.artifacts.plot_path(partition, method.value, cl), result.plot_frame())
        if not result.calibration.bounded:
            logger.warning("%s at cl=%.2f has unbounded intervals (calibration set too small)", method.value, cl)
        return csv_path, plot_path

    # ---------- evaluate / report ----------

    def evaluate_partition(self, partition: int, methods: Optional[Iterable] = None, cls: Optional[Iterable[float]] = None) -> List[EvaluationReport]:
        methods, cls = self._check_cells(methods, cls)
        cache: dict = {}
        reports = []
        for method in methods:
            for cl in cls:
                result = self.run_cell(partition, method, cl, cache)
                self.artifacts.write_json(
                    self.artifacts.calibration_path(partition, method.value, cl), result.calibration.to_dict(),
                )
                reports.append(evaluate(result, method.value, cl, self.config.bins, partition=partition))
        self.artifacts.write_json(self.artifacts.reports_path(partition), [r.to_dict() for r in reports])
        return reports

    def evaluate(self, partitions: Optional[Iterable[int]] = None, methods: Optional[Iterable] = None, cls: Optional[Iterable[float]] = None) -> List[EvaluationReport]:
        """Per-partition reports via Celery, then the partition average, tables and DB records."""
        from ..tasks import evaluate_partition_task

        partitions = self._check_partitions(partitions)
        methods, cls = self._check_cells(methods, cls)
        method_values = [m.value for m in methods]
        run = self.runs.record_run(self.config, self.output_dir, status="trained")
        try:
            jobs = [evaluate_partition_task.delay(self.payload(), self.output_dir, p, method_values, cls) for p in partitions]
            per_partition = [EvaluationReport.from_dict(d) for job in jobs for d in job.get()]
        except DrfcpError as ex:
            self.runs.mark(run, "failed", str(ex))
            raise

        aggregate = aggregate_reports(per_partition)
        self.artifacts.write_json(ArtifactsService.AGGREGATE, {
            "partitions": partitions,
            "reports": [r.to_dict() for r in aggregate],
        })
        accuracy, interval_table = report_tables(aggregate, self.config.bins, METHOD_ORDER)
        self.artifacts.write_frame("table_accuracy.csv", accuracy)
        self.artifacts.write_frame("table_intervals.csv", interval_table)

        manifest = self.load_manifest()
        manifest.reports += [self.artifacts.reports_path(p) for p in partitions]
        manifest.reports += [ArtifactsService.AGGREGATE, "table_accuracy.csv", "table_intervals.csv"]
        self.save_manifest(manifest)

        self.runs.record_reports(run, per_partition + aggregate)
        self.runs.mark(run, "evaluated")
        logger.info("evaluated %d methods x %d confidence levels over %d partitions", len(methods), len(cls), len(partitions))
        return aggregate

    def report(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        payload = self.artifacts.read_json(ArtifactsService.AGGREGATE)
        reports = [EvaluationReport.from_dict(d) for d in payload["reports"]]
        return report_tables(reports, self.config.bins, METHOD_ORDER)
