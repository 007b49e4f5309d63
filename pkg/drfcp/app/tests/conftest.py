import json

import pytest
from rest_framework.test import APIClient

from drfcp.app.services.experiments_service import ExperimentsService

from .factories import TinyConfigFactory


@pytest.fixture(autouse=True)
def drfcp_settings(settings):
    settings.DRFCP = {"OUTPUT_DIR": None, "THREADS": 1}
    return settings


@pytest.fixture
def api_client():
    return APIClient()


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / "run"


@pytest.fixture
def tiny_payload(run_dir):
    return TinyConfigFactory(output_dir=str(run_dir))


@pytest.fixture
def config_file(tmp_path, tiny_payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_payload), encoding="utf-8")
    return path


@pytest.fixture
def service(tiny_payload):
    return ExperimentsService.from_payload(tiny_payload)


@pytest.fixture
def trained_service(db, service):
    service.train()
    return service
