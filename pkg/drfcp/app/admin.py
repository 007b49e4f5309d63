from django.contrib import admin
from .models import ExperimentRun, EvaluationRecord


class EvaluationRecordInline(admin.TabularInline):
    model = EvaluationRecord
    extra = 0
    fields = ("method", "confidence_level", "partition", "r2", "coverage", "mean_width", "mad_conditional_coverage")
    readonly_fields = fields
    can_delete = False


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("id", "output_dir", "status", "seed", "n_partitions", "created_at")
    list_filter = ("status",)
    search_fields = ("output_dir", "config_hash")
    ordering = ("-created_at",)
    readonly_fields = ("config_hash", "config", "created_at", "updated_at")
    inlines = [EvaluationRecordInline]


@admin.register(EvaluationRecord)
class EvaluationRecordAdmin(admin.ModelAdmin):
    list_display = ("run", "method", "confidence_level", "partition", "coverage", "mean_width", "mad_conditional_coverage")
    list_filter = ("method", "confidence_level")
    search_fields = ("run__output_dir",)
