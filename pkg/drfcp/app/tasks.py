# app/tasks.py
"""
Per-partition jobs. Each task rebuilds the service from the config payload,
so workers need nothing but the payload and the shared output directory.
"""
import logging
from typing import Dict, List

from celery import shared_task

from .services.experiments_service import ExperimentsService

logger = logging.getLogger(__name__)


@shared_task(name="drfcp.train_partition")
def train_partition_task(payload: dict, output_dir: str, partition: int) -> Dict[str, str]:
    logger.info("training partition %d in %s", partition, output_dir)
    return ExperimentsService.from_payload(payload, output_dir).train_partition(partition)


@shared_task(name="drfcp.evaluate_partition")
def evaluate_partition_task(payload: dict, output_dir: str, partition: int, methods: List[str], cls: List[float]) -> List[dict]:
    logger.info("evaluating partition %d in %s", partition, output_dir)
    service = ExperimentsService.from_payload(payload, output_dir)
    return [report.to_dict() for report in service.evaluate_partition(partition, methods, cls)]
