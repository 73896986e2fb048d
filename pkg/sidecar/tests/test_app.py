import base64
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from layersplat_sidecar.app import create_app
from layersplat_sidecar.backends import DEFAULT_MODEL_ID


def encode_image(img: np.ndarray) -> dict:
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return {"image": base64.b64encode(img8.tobytes()).decode(),
            "height": img.shape[0], "width": img.shape[1]}


def request_body(img, prompt="a person wearing a bright garment", **kw):
    body = encode_image(img)
    body["prompt"] = prompt
    body.update(kw)
    return body


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture
def image(rng=np.random.default_rng(0)):
    return rng.uniform(0, 1, (64, 64, 3))


def decode_grad(payload, h, w):
    raw = base64.b64decode(payload["grad"])
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 3)


class TestHealth:
    def test_ready_after_startup(self, client):
        r = client.get("/v1/health")
        assert r.status_code == 200
        assert r.json()["status"] == "ready"

    def test_model_id_is_configured_checkpoint(self, client):
        assert client.get("/v1/health").json()["model_id"] == DEFAULT_MODEL_ID

    def test_custom_model_id(self):
        app = create_app(model_id="my-checkpoint-v2")
        c = TestClient(app)
        assert c.get("/v1/health").json()["model_id"] == "my-checkpoint-v2"

    def test_503_while_loading(self, monkeypatch):
        import layersplat_sidecar.backends as B

        class SlowBackend(B.ProceduralBackend):
            def load(self):
                time.sleep(0.8)

        monkeypatch.setattr(B, "ProceduralBackend", SlowBackend)
        monkeypatch.setattr("layersplat_sidecar.app.make_backend",
                            lambda kind, mid: SlowBackend())
        app = create_app(defer_load=True)
        c = TestClient(app)
        r = c.get("/v1/health")
        assert r.status_code == 503
        assert r.json()["status"] == "loading"
        time.sleep(1.2)
        assert c.get("/v1/health").status_code == 200

    def test_sds_grad_503_while_loading(self, monkeypatch, image):
        monkeypatch.setattr("layersplat_sidecar.app.make_backend",
                            lambda kind, mid: type("B", (), {
                                "model_id": "x", "load": lambda self: time.sleep(5)})())
        app = create_app(defer_load=True)
        c = TestClient(app)
        r = c.post("/v1/sds_grad", json=request_body(image))
        assert r.status_code == 503


class TestSdsGrad:
    def test_shape_and_finiteness(self, client, image):
        r = client.post("/v1/sds_grad", json=request_body(image, seed=1))
        assert r.status_code == 200
        payload = r.json()
        grad = decode_grad(payload, 64, 64)
        assert grad.shape == (64, 64, 3)
        assert np.all(np.isfinite(grad))
        assert payload["w_t"] > 0
        assert 0.0 < payload["t_sampled"] < 1.0

    def test_seed_determinism_bitwise(self, client, image):
        body = request_body(image, seed=42)
        r1 = client.post("/v1/sds_grad", json=body)
        r2 = client.post("/v1/sds_grad", json=body)
        assert r1.json()["grad"] == r2.json()["grad"]
        assert r1.json()["w_t"] == r2.json()["w_t"]

    def test_different_seeds_differ(self, client, image):
        g1 = client.post("/v1/sds_grad", json=request_body(image, seed=1)).json()
        g2 = client.post("/v1/sds_grad", json=request_body(image, seed=2)).json()
        assert g1["grad"] != g2["grad"]

    def test_zero_guidance_scale_unconditional_path(self, client, image):
        body = request_body(image, seed=3, guidance_scale=0.0,
                            negative_prompt="a person wearing a bright garment")
        r = client.post("/v1/sds_grad", json=body)
        assert r.status_code == 200
        grad = decode_grad(r.json(), 64, 64)
        assert grad.shape == (64, 64, 3) and np.all(np.isfinite(grad))

    def test_pose_keypoints_accepted(self, client, image):
        body = request_body(image, seed=4,
                            pose_keypoints=[[10.0, 20.0, 0.9], [30.0, 40.0, 0.5]])
        assert client.post("/v1/sds_grad", json=body).status_code == 200

    def test_latent_space_flag_accepted(self, client, image):
        body = request_body(image, seed=5, latent_space=True)
        r = client.post("/v1/sds_grad", json=body)
        assert r.status_code == 200
        assert decode_grad(r.json(), 64, 64).shape == (64, 64, 3)

    def test_timestep_range_respected(self, client, image):
        body = request_body(image, seed=6, t_min=0.4, t_max=0.5)
        t = client.post("/v1/sds_grad", json=body).json()["t_sampled"]
        assert 0.4 <= t <= 0.5


class TestErrors:
    def test_missing_field_400(self, client):
        r = client.post("/v1/sds_grad", json={"prompt": "x"})
        assert r.status_code == 400

    def test_bad_base64_400(self, client, image):
        body = request_body(image)
        body["image"] = "!!!not-base64!!!"
        assert client.post("/v1/sds_grad", json=body).status_code == 400

    def test_wrong_payload_size_400(self, client, image):
        body = request_body(image)
        body["height"] = 128  # payload no longer matches
        assert client.post("/v1/sds_grad", json=body).status_code == 400

    def test_unsupported_resolution_422(self, client, rng=np.random.default_rng(1)):
        tiny = rng.uniform(0, 1, (16, 16, 3))
        assert client.post("/v1/sds_grad",
                           json=request_body(tiny)).status_code == 422

    def test_bad_timestep_range_400(self, client, image):
        body = request_body(image, t_min=0.9, t_max=0.2)
        assert client.post("/v1/sds_grad", json=body).status_code == 400

    def test_empty_prompt_400(self, client, image):
        body = request_body(image, prompt="")
        assert client.post("/v1/sds_grad", json=body).status_code == 400
