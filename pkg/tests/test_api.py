import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.main import app
from tests.conftest import tiny_config_dict

API = settings.API_STR + "/experiments"


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path))
    with TestClient(app) as c:
        yield c


def test_welcome(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["message"] == f"Welcome to {settings.PROJECT_NAME} API"


def test_default_config(client):
    response = client.get(f"{API}/config")
    assert response.status_code == 200
    data = response.json()["data"]
    assert data["flow"]["n_blocks"] == 8
    assert data["evaluation"]["n_eval"] == 10_000


def test_pretrain_then_finetune(client, tmp_path):
    response = client.post(f"{API}/pretrain", params={"out": "run1"}, json=tiny_config_dict())
    assert response.status_code == 200
    body = response.json()
    assert body["message"] == "pretrain completed"
    assert (tmp_path / "run1" / "pretrained.ckpt").is_file()
    assert body["data"]["artifacts"]["checkpoint"] == str((tmp_path / "run1" / "pretrained.ckpt").resolve())

    response = client.post(f"{API}/finetune", params={"out": "run1"}, json=tiny_config_dict())
    assert response.status_code == 200
    assert set(response.json()["data"]["metrics"]) >= {"kl_before", "kl_after"}


def test_finetune_without_checkpoint(client):
    response = client.post(f"{API}/finetune", params={"out": "empty"}, json=tiny_config_dict())
    assert response.status_code == 404
    assert response.json()["data"]["error"] == "CheckpointNotFoundError"
    assert response.json()["data"]["exit_code"] == 3


def test_invalid_config(client):
    bad = tiny_config_dict()
    bad["flow"]["hidden"] = 0
    response = client.post(f"{API}/pretrain", json=bad)
    assert response.status_code == 422
    assert response.json()["message"] == "Validation Error"


def test_output_directory_cannot_escape(client):
    response = client.post(f"{API}/pretrain", params={"out": "../elsewhere"}, json=tiny_config_dict())
    assert response.status_code == 400
    assert response.json()["data"]["error"] == "UsageError"


def test_sample_count_must_be_positive(client):
    response = client.post(f"{API}/sample", params={"n": 0}, json=tiny_config_dict())
    assert response.status_code == 422


def test_unknown_route(client):
    response = client.get(f"{API}/nothing")
    assert response.status_code == 404
    assert response.json()["data"] == []
