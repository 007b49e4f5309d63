from rest_framework import viewsets, permissions
from rest_framework.decorators import action
from rest_framework.exceptions import ValidationError
from rest_framework.response import Response
from drf_yasg.utils import swagger_auto_schema
from drf_yasg import openapi

from ..serializers import (
    ExperimentRunSerializer,
    ExperimentRunDetailSerializer,
    EvaluationRecordSerializer,
)
from ..services.runs_service import RunsService


class RunViewSet(viewsets.ViewSet):
    permission_classes = [permissions.AllowAny]

    status_param = openapi.Parameter(
        "status",
        openapi.IN_QUERY,
        description="Filter by run status (created, trained, evaluated, failed)",
        type=openapi.TYPE_STRING,
    )
    aggregate_param = openapi.Parameter(
        "aggregate",
        openapi.IN_QUERY,
        description="true: partition averages only; false: per-partition reports only",
        type=openapi.TYPE_BOOLEAN,
    )
    method_param = openapi.Parameter(
        "method",
        openapi.IN_QUERY,
        description="Filter by method (ann_cp, ann_mcd, ann_rf, drf_std, drf_std_ens)",
        type=openapi.TYPE_STRING,
    )

    @swagger_auto_schema(
        manual_parameters=[status_param],
        responses={200: ExperimentRunSerializer(many=True)},
        operation_summary="List Runs",
    )
    def list(self, request):
        filters = {}
        run_status = request.query_params.get("status")
        if run_status:
            filters["status"] = run_status

        service = RunsService()
        runs = service.get_runs(filters)
        return Response(ExperimentRunSerializer(runs, many=True).data)

    @swagger_auto_schema(
        responses={200: ExperimentRunDetailSerializer, 404: "Not Found"},
        operation_summary="Get Run by ID",
    )
    def retrieve(self, request, pk=None):
        service = RunsService()
        run = service.get_run_by_id(pk)
        return Response(ExperimentRunDetailSerializer(run).data)

    @swagger_auto_schema(
        manual_parameters=[aggregate_param, method_param],
        responses={200: EvaluationRecordSerializer(many=True), 404: "Not Found"},
        operation_summary="Get Run Reports",
    )
    @action(detail=True, methods=["get"])
    def reports(self, request, pk=None):
        aggregate = request.query_params.get("aggregate")
        if aggregate is not None:
            if aggregate.lower() not in ("true", "false"):
                raise ValidationError({"aggregate": ["Must be true or false."]})
            aggregate = aggregate.lower() == "true"

        service = RunsService()
        records = service.get_reports(pk, aggregate=aggregate, method=request.query_params.get("method"))
        return Response(EvaluationRecordSerializer(records, many=True).data)
