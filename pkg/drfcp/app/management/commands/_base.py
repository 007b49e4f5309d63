# app/management/commands/_base.py
import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from ...exceptions import ConfigError, DrfcpError
from ...experiment import ExperimentConfig, Method
from ...learning.conformal import QuantileMode
from ...serializers.config_serializers import ExperimentConfigSerializer
from ...services.experiments_service import ExperimentsService

logger = logging.getLogger(__name__)


def confidence_level(value: str) -> float:
    cl = float(value)
    if not 0.0 < cl < 1.0:
        raise ValueError(value)
    return cl


class ExperimentCommand(BaseCommand):
    """
    Shared plumbing: --config loading and validation, the --seed and
    --quantile-mode overrides, and translation of domain errors into exit
    codes (2 config, 3 data, 4 divergence, 5 missing artifact).
    """

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Experiment config JSON file")
        parser.add_argument("--seed", type=int, help="Override the master seed")
        parser.add_argument(
            "--quantile-mode",
            choices=[m.value for m in QuantileMode],
            help="Override the calibration quantile mode",
        )

    @staticmethod
    def add_cell_arguments(parser, required: bool):
        """--partition/--method/--cl; single values when required, repeatable otherwise."""
        action = "store" if required else "append"
        parser.add_argument("--partition", type=int, action=action, required=required)
        parser.add_argument("--method", choices=[m.value for m in Method], action=action, required=required)
        parser.add_argument("--cl", type=confidence_level, action=action, required=required, help="Confidence level in (0, 1)")

    def load_config(self, options) -> ExperimentConfig:
        path = Path(options["config"])
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as ex:
            raise ConfigError(f"config file {path} is not valid JSON: {ex}") from ex
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        if options.get("seed") is not None:
            payload["seed"] = options["seed"]
        if options.get("quantile_mode"):
            payload["quantile_mode"] = options["quantile_mode"]

        serializer = ExperimentConfigSerializer(data=payload)
        serializer.is_valid(raise_exception=True)
        return serializer.save()

    def handle(self, *args, **options):
        try:
            service = ExperimentsService(self.load_config(options))
            self.run(service, **options)
        except ValidationError as ex:
            raise CommandError(f"invalid config: {ex.detail}", returncode=ConfigError.exit_code) from ex
        except DrfcpError as ex:
            logger.error("%s failed: %s", self.__module__.rsplit(".", 1)[-1], ex)
            raise CommandError(str(ex), returncode=ex.exit_code) from ex

    def run(self, service: ExperimentsService, **options):
        raise NotImplementedError
