"""Guidance clients: the deterministic mock and the HTTP wire client.

The wire protocol carries the rendered image (8-bit base64) plus prompt,
pose keypoints, timestep range and guidance scale; the service answers with
an image-space gradient (float32 base64, row-major H*W*3) already scaled by
its noise-level weight. The mock implements the same interface in-process
and is what every training test uses.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import requests

DEFAULT_T_RANGE = (0.02, 0.98)
ANNEALED_T_MAX = 0.5
SIDECAR_PATH = "/v1/sds_grad"
HEALTH_PATH = "/v1/health"


class GuidanceUnavailable(RuntimeError):
    """The guidance service could not produce a gradient (after retries).
    Training steps skip the guidance term when they catch this."""


@dataclass
class GuidanceRequest:
    image: np.ndarray                     # (H, W, 3) float in [0, 1]
    prompt: str
    negative_prompt: Optional[str] = None
    pose_keypoints: Optional[np.ndarray] = None   # (J, 3) pixel x, y, confidence
    t_range: tuple[float, float] = DEFAULT_T_RANGE
    guidance_scale: float = 50.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("guidance request image must be HxWx3")
        if not self.prompt:
            raise ValueError("guidance prompt must be nonempty")
        tmin, tmax = self.t_range
        if not (0.0 < tmin < tmax < 1.0):
            raise ValueError("timestep range must satisfy 0 < t_min < t_max < 1")


@dataclass
class GuidanceResponse:
    grad: np.ndarray       # (H, W, 3) image-space gradient
    w_t: float
    t_sampled: float = 0.0
    model_id: str = "mock"


class MockGuidance:
    """Deterministic stand-in: gradient = weight * (image - target)."""

    def __init__(self, target: np.ndarray, weight: float = 1.0):
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.ndim != 3 or self.target.shape[2] != 3:
            raise ValueError("mock target must be HxWx3")
        self.weight = float(weight)
        if self.weight < 0:
            raise ValueError("mock weight must be >= 0")

    def sds_gradient(self, request: GuidanceRequest) -> GuidanceResponse:
        if request.image.shape != self.target.shape:
            raise ValueError(
                f"mock target shape {self.target.shape} does not match request {request.image.shape}")
        grad = self.weight * (request.image - self.target)
        # w_t must stay positive even for the weight-0 mock.
        return GuidanceResponse(grad=grad, w_t=max(self.weight, 1e-12), model_id="mock")


def mock_guidance(target: np.ndarray, weight: float = 1.0) -> MockGuidance:
    return MockGuidance(target, weight)


def encode_sds_request(request: GuidanceRequest) -> dict:
    """GuidanceRequest -> wire map (image quantized to 8-bit)."""
    img8 = np.clip(np.round(request.image * 255.0), 0, 255).astype(np.uint8)
    body = {
        "image": base64.b64encode(img8.tobytes()).decode("ascii"),
        "height": int(img8.shape[0]),
        "width": int(img8.shape[1]),
        "prompt": request.prompt,
        "t_min": float(request.t_range[0]),
        "t_max": float(request.t_range[1]),
        "guidance_scale": float(request.guidance_scale),
    }
    if request.negative_prompt is not None:
        body["negative_prompt"] = request.negative_prompt
    if request.pose_keypoints is not None:
        body["pose_keypoints"] = [[float(a), float(b), float(c)]
                                  for a, b, c in np.asarray(request.pose_keypoints)]
    if request.seed is not None:
        body["seed"] = int(request.seed)
    return body


def decode_sds_response(payload: dict, height: int, width: int) -> GuidanceResponse:
    """Wire map -> GuidanceResponse; raises ValueError on malformed data."""
    try:
        raw = base64.b64decode(payload["grad"])
        w_t = float(payload["w_t"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"malformed guidance response: {e}") from e
    expected = height * width * 3 * 4
    if len(raw) != expected:
        raise ValueError(
            f"guidance gradient payload has {len(raw)} bytes, expected {expected}")
    grad = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(height, width, 3)
    if not np.all(np.isfinite(grad)):
        raise ValueError("guidance gradient contains non-finite values")
    if w_t <= 0:
        raise ValueError("guidance response w_t must be positive")
    return GuidanceResponse(grad=grad, w_t=w_t,
                            t_sampled=float(payload.get("t_sampled", 0.0)),
                            model_id=str(payload.get("model_id", "unknown")))


class HttpGuidance:
    """Client for the sidecar wire protocol; blocking, with bounded retries."""

    def __init__(self, url: str, timeout: float = 120.0, max_retries: int = 2):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries

    def sds_gradient(self, request: GuidanceRequest) -> GuidanceResponse:
        body = encode_sds_request(request)
        h, w = request.image.shape[:2]
        last_err = None
        for _ in range(self.max_retries + 1):
            try:
                r = requests.post(self.url + SIDECAR_PATH, json=body, timeout=self.timeout)
                r.raise_for_status()
                return decode_sds_response(r.json(), h, w)
            except (requests.RequestException, ValueError, json.JSONDecodeError) as e:
                last_err = e
        raise GuidanceUnavailable(f"guidance service failed after retries: {last_err}")

    def health(self) -> dict:
        r = requests.get(self.url + HEALTH_PATH, timeout=self.timeout)
        r.raise_for_status()
        return r.json()


def annealed_t_range(progress: float,
                     start: tuple[float, float] = DEFAULT_T_RANGE,
                     end_t_max: float = ANNEALED_T_MAX) -> tuple[float, float]:
    """Linear annealing of the timestep upper bound over training progress
    in [0, 1]."""
    p = min(max(progress, 0.0), 1.0)
    return (start[0], start[1] + p * (end_t_max - start[1]))
