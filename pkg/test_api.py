"""Tests for the HTTP service."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.core.model_store import init_model_store, reset_model_store
from app.main import app
from app.schemas.config import NetworkConfig, PreprocessConfig
from app.services.checkpoint import save_checkpoint
from app.services.network import build_model

client = TestClient(app)

ROLES = ["prefire_mask", "wind_x", "wind_y", "elevation"]


@pytest.fixture(autouse=True)
def fresh_store():
    reset_model_store()
    yield
    reset_model_store()


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "model.ckpt"
    model = build_model(NetworkConfig(base_width=2, in_channels=4, in_size=16))
    save_checkpoint(path, model, channel_roles=ROLES, preprocess=PreprocessConfig(normalize=False))
    init_model_store(str(path))
    return path


def _stack() -> list:
    rng = np.random.default_rng(0)
    prefire = (rng.random((16, 16)) < 0.2).astype(float)
    stack = np.stack([prefire, np.full((16, 16), 0.5), np.full((16, 16), -0.5), rng.standard_normal((16, 16))])
    return stack.tolist()


def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json() == {"status": "Wildfire segmentation service running"}


def test_param_counts():
    response = client.get("/api/models/param-counts")
    assert response.status_code == 200
    configs = response.json()["configs"]
    assert [c["name"] for c in configs] == ["ht-unet[B=8]", "td-fusion-unet[B=4]", "td-fusion-unet[B=8]"]
    assert all(c["count"] > 0 for c in configs)


def test_metrics_endpoint():
    response = client.post(
        "/api/metrics",
        json={"prediction": [[1, 1, 0, 0]], "target": [[1, 0, 1, -1]]},
    )
    assert response.status_code == 200
    body = response.json()
    assert (body["tp"], body["fp"], body["fn"], body["tn"]) == (1, 1, 1, 0)
    assert body["f1"] == pytest.approx(0.5)


def test_metrics_rejects_bad_input():
    response = client.post("/api/metrics", json={"prediction": [[1, 0]], "target": [[1, 0, 0]]})
    assert response.status_code == 422
    response = client.post("/api/metrics", json={"prediction": [[1]], "target": [[2]]})
    assert response.status_code == 422


def test_f1_endpoint():
    response = client.post("/api/metrics/f1", json={"precision": 0.876, "recall": 0.586})
    assert response.status_code == 200
    assert response.json()["f1"] == pytest.approx(0.702, abs=1e-3)


def test_predict_without_checkpoint_is_unavailable(monkeypatch):
    monkeypatch.setattr(settings, "checkpoint_path", "")
    response = client.post("/api/predict", json={"inputs": _stack()})
    assert response.status_code == 503
    assert "E_CHECKPOINT" in response.json()["detail"]


def test_predict_with_checkpoint(checkpoint):
    response = client.post("/api/predict", json={"inputs": _stack()})
    assert response.status_code == 200
    body = response.json()
    probs = np.array(body["probabilities"])
    assert probs.shape == (1, 16, 16)
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_array_equal(np.array(body["mask"]), (probs > body["threshold"]).astype(int))

    again = client.post("/api/predict", json={"inputs": _stack()})
    assert again.json() == body


def test_predict_rejects_wrong_channel_count(checkpoint):
    response = client.post("/api/predict", json={"inputs": _stack()[:3]})
    assert response.status_code == 422
    assert "E_SHAPE" in response.json()["detail"]
