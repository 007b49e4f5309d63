# app/services/runs_service.py
from typing import Dict, Iterable, Optional

from django.db import transaction
from django.shortcuts import get_object_or_404

from ..experiment import ExperimentConfig
from ..learning.metrics import EvaluationReport
from ..models import EvaluationRecord, ExperimentRun


class RunsService:
    """
    Database bookkeeping for experiment runs. Returns model instances /
    querysets; controllers handle serialization.
    """

    # ---------- Public API used by controllers ----------

    def get_runs(self, filters: Optional[Dict] = None):
        qs = ExperimentRun.objects.all()
        if filters:
            qs = qs.filter(**filters)
        return qs.order_by("-created_at")

    def get_run_by_id(self, run_id) -> ExperimentRun:
        return get_object_or_404(ExperimentRun, pk=run_id)

    def get_reports(self, run_id, aggregate: Optional[bool] = None, method: Optional[str] = None):
        run = self.get_run_by_id(run_id)
        qs = run.evaluations.all()
        if aggregate is not None:
            qs = qs.filter(partition__isnull=aggregate)
        if method:
            qs = qs.filter(method=method)
        return qs

    # ---------- Used by ExperimentsService ----------

    def record_run(self, config: ExperimentConfig, output_dir: str, status: str = "created") -> ExperimentRun:
        run, _ = ExperimentRun.objects.update_or_create(
            output_dir=output_dir,
            defaults={
                "config_hash": config.config_hash(),
                "config": config.to_dict(),
                "seed": config.seed,
                "n_partitions": config.split.n_partitions,
                "status": status,
                "error": "",
            },
        )
        return run

    def mark(self, run: ExperimentRun, status: str, error: str = "") -> ExperimentRun:
        run.status = status
        run.error = error
        run.save(update_fields=["status", "error", "updated_at"])
        return run

    @transaction.atomic
    def record_reports(self, run: ExperimentRun, reports: Iterable[EvaluationReport]):
        """
        Upserts one row per report. Within each partition the reports cover
        (the aggregate counts as one), rows for other cells are removed.
        """
        reports = list(reports)
        cells = {(r.partition, r.method, r.confidence_level) for r in reports}
        partitions = {r.partition for r in reports}
        stale = [
            record.pk for record in run.evaluations.all()
            if record.partition in partitions and (record.partition, record.method, record.confidence_level) not in cells
        ]
        EvaluationRecord.objects.filter(pk__in=stale).delete()

        records = []
        for report in reports:
            payload = report.to_dict()
            record, _ = EvaluationRecord.objects.update_or_create(
                run=run,
                method=report.method,
                confidence_level=report.confidence_level,
                partition=report.partition,
                defaults={
                    "r2": report.r2,
                    "coverage": report.coverage,
                    "mean_width": payload["mean_width"],
                    "mad_conditional_coverage": report.mad_conditional_coverage,
                    "metrics": payload,
                },
            )
            records.append(record)
        return records
