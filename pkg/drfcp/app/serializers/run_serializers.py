from rest_framework import serializers
from ..models import ExperimentRun, EvaluationRecord


class EvaluationRecordSerializer(serializers.ModelSerializer):
    is_aggregate = serializers.BooleanField(read_only=True)

    class Meta:
        model = EvaluationRecord
        fields = [
            "id", "method", "confidence_level", "partition", "is_aggregate",
            "r2", "coverage", "mean_width", "mad_conditional_coverage",
            "metrics", "created_at",
        ]
        read_only_fields = fields


class ExperimentRunSerializer(serializers.ModelSerializer):
    n_evaluations = serializers.IntegerField(source="evaluations.count", read_only=True)

    class Meta:
        model = ExperimentRun
        fields = [
            "id", "output_dir", "config_hash", "seed", "n_partitions",
            "status", "error", "n_evaluations", "created_at", "updated_at",
        ]
        read_only_fields = fields


class ExperimentRunDetailSerializer(ExperimentRunSerializer):
    class Meta(ExperimentRunSerializer.Meta):
        fields = ExperimentRunSerializer.Meta.fields + ["config"]
        read_only_fields = fields
