"""
HTTP service: health, model info, inference and metrics endpoints
"""
import asyncio

import httpx
import numpy as np
import pytest

from fmnet.networks.network import build_network, predict
from fmnet.pipeline.data import decode_hsi, encode_hsi
from fmnet.pipeline.training import make_checkpoint, save_checkpoint
from fmnet.routers import inference_router
from fmnet.routers.inference_router import model_registry
from fmnet.utils.config import settings
from main import app


@pytest.fixture
async def client():
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
        yield client


@pytest.fixture(autouse=True)
def _fresh_registry(monkeypatch):
    monkeypatch.setattr(settings, "checkpoint_path", None)
    model_registry.reset()
    yield
    model_registry.reset()


@pytest.fixture
def served(tmp_path, tiny_config):
    net = build_network(tiny_config, seed=0)
    path = save_checkpoint(make_checkpoint(net, None, 0, []), tmp_path / "served.ckpt")
    model_registry.load(str(path))
    return net


def _upload(array, name="image.rgb"):
    return (name, encode_hsi(np.asarray(array, dtype=np.float32)), "application/octet-stream")


async def test_root_lists_endpoints(client):
    response = await client.get("/")
    assert response.status_code == 200
    assert set(response.json()["endpoints"]) >= {"infer", "metrics", "model_info", "health"}


async def test_health_reports_model_state(client, served):
    response = await client.get("/health")
    body = response.json()
    assert response.status_code == 200
    assert body["status"] == "healthy"
    assert body["model_loaded"] is True


async def test_inference_without_a_model_is_unavailable(client, rng):
    response = await client.post("/infer", files={"file": _upload(rng.random((3, 8, 8)))})
    assert response.status_code == 503
    assert response.json()["error_code"] == "503"


async def test_inference_returns_a_container(client, served, rng):
    rgb = rng.random((3, 12, 12), dtype=np.float32)
    response = await client.post("/infer", files={"file": _upload(rgb, "scene.rgb")})
    assert response.status_code == 200
    assert response.headers["content-type"] == "application/octet-stream"
    assert "scene.hsi" in response.headers["content-disposition"]
    cube = decode_hsi(response.content)
    assert cube.tobytes() == predict(served, rgb).tobytes()


async def test_inference_rejects_a_broken_container(client, served):
    response = await client.post("/infer", files={"file": ("bad.rgb", b"HSC1\x03\x00", "application/octet-stream")})
    assert response.status_code == 400


async def test_inference_rejects_non_rgb_input(client, served, rng):
    response = await client.post("/infer", files={"file": _upload(rng.random((5, 12, 12)))})
    assert response.status_code == 400


async def test_model_info(client, served, tiny_config):
    response = await client.get("/model-info")
    body = response.json()
    assert response.status_code == 200
    assert body["network"]["bands"] == tiny_config.bands
    assert body["epoch"] == 0
    assert body["parameter_count"] == sum(p.numel() for p in served.parameters())


async def test_metrics_of_identical_cubes(client, rng):
    cube = rng.random((4, 12, 12))
    response = await client.post(
        "/metrics", files={"prediction": _upload(cube, "a.hsi"), "reference": _upload(cube, "b.hsi")},
    )
    body = response.json()
    assert response.status_code == 200
    assert body["rmse"] == 0.0
    assert body["ssim"] == pytest.approx(1.0, abs=1e-9)


async def test_metrics_shape_mismatch(client, rng):
    response = await client.post(
        "/metrics",
        files={"prediction": _upload(rng.random((4, 12, 12))), "reference": _upload(rng.random((4, 12, 13)))},
    )
    assert response.status_code == 400


async def test_first_request_loads_the_configured_checkpoint(client, tmp_path, tiny_config, monkeypatch):
    net = build_network(tiny_config, seed=1)
    path = save_checkpoint(make_checkpoint(net, None, 4, []), tmp_path / "lazy.ckpt")
    monkeypatch.setattr(settings, "checkpoint_path", str(path))
    assert not model_registry.loaded

    response = await client.get("/model-info")
    assert response.status_code == 200
    assert response.json()["epoch"] == 4
    assert model_registry.loaded and model_registry.path == str(path)


async def test_concurrent_first_requests_load_once(client, tmp_path, tiny_config, monkeypatch):
    net = build_network(tiny_config, seed=2)
    path = save_checkpoint(make_checkpoint(net, None, 0, []), tmp_path / "shared.ckpt")
    monkeypatch.setattr(settings, "checkpoint_path", str(path))
    loads = []
    original = inference_router.load_checkpoint

    def counting_load(p):
        loads.append(p)
        return original(p)

    monkeypatch.setattr(inference_router, "load_checkpoint", counting_load)
    responses = await asyncio.gather(*[client.get("/model-info") for _ in range(8)])
    assert [r.status_code for r in responses] == [200] * 8
    assert loads == [str(path)]


async def test_unreadable_configured_checkpoint_is_unavailable(client, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "checkpoint_path", str(tmp_path / "missing.ckpt"))
    response = await client.get("/model-info")
    assert response.status_code == 503
    assert not model_registry.loaded
