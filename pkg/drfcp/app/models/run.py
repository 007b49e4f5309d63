import uuid
from django.db import models


class ExperimentRun(models.Model):
    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    output_dir = models.CharField(max_length=500, unique=True)
    config_hash = models.CharField(max_length=64, db_index=True)
    config = models.JSONField(default=dict)
    seed = models.IntegerField(default=0)
    n_partitions = models.IntegerField(default=1)
    status = models.CharField(
        max_length=20,
        choices=[
            ("created", "Created"),
            ("trained", "Trained"),
            ("evaluated", "Evaluated"),
            ("failed", "Failed"),
        ],
        default="created",
    )
    error = models.TextField(blank=True, default="")
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.output_dir} ({self.status})"


class EvaluationRecord(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="evaluations")
    method = models.CharField(
        max_length=20,
        choices=[
            ("ann_cp", "ANN CP"),
            ("ann_mcd", "ANN MCD"),
            ("ann_rf", "ANN RF"),
            ("drf_std", "DRF STD"),
            ("drf_std_ens", "DRF STD + Ensemble STD"),
        ],
    )
    confidence_level = models.FloatField()
    partition = models.IntegerField(null=True, blank=True)  # NULL: average over partitions
    r2 = models.FloatField()
    coverage = models.FloatField()
    mean_width = models.FloatField(null=True, blank=True)  # NULL when some interval is unbounded
    mad_conditional_coverage = models.FloatField()
    metrics = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["method", "confidence_level", "partition"]
        indexes = [models.Index(fields=["run", "method", "confidence_level"], name="eval_run_method_cl_idx")]

    @property
    def is_aggregate(self) -> bool:
        return self.partition is None
