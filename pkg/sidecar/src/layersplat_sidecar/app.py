"""The guidance HTTP service.

POST /v1/sds_grad : image + prompt (+ pose keypoints, timestep range,
guidance scale, seed) -> base64 float32 image-space gradient with its
noise-level weight. GET /v1/health : readiness and the configured model id.

Errors: 400 malformed request, 422 unsupported resolution, 503 while the
model is loading.
"""
from __future__ import annotations

import base64
import threading
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backends import DEFAULT_MODEL_ID, GradRequest, make_backend

MIN_SIDE = 64
MAX_SIDE = 1024


class SdsRequest(BaseModel):
    image: str                       # base64 8-bit RGB, row-major H*W*3
    height: int
    width: int
    prompt: str = Field(min_length=1)
    negative_prompt: Optional[str] = None
    pose_keypoints: Optional[List[List[float]]] = None
    t_min: float = 0.02
    t_max: float = 0.98
    guidance_scale: float = 50.0
    seed: Optional[int] = None
    latent_space: bool = False


class SdsResponse(BaseModel):
    grad: str                        # base64 float32, row-major H*W*3
    w_t: float
    t_sampled: float
    model_id: str


def create_app(backend_kind: str = "procedural",
               model_id: Optional[str] = None,
               defer_load: bool = False) -> FastAPI:
    backend = make_backend(backend_kind, model_id)
    app = FastAPI(title="layersplat guidance sidecar")
    state = {"ready": False, "error": None}

    def _load():
        try:
            backend.load()
            state["ready"] = True
        except Exception as e:  # noqa: BLE001 - reported via /v1/health
            state["error"] = str(e)

    if defer_load:
        threading.Thread(target=_load, daemon=True).start()
    else:
        _load()

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"error": "malformed request",
                                     "detail": exc.errors()})

    @app.get("/v1/health")
    def health():
        if state["error"]:
            return JSONResponse(status_code=503,
                                content={"status": "error", "detail": state["error"]})
        if not state["ready"]:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ready", "model_id": backend.model_id}

    @app.post("/v1/sds_grad")
    def sds_grad(req: SdsRequest):
        if not state["ready"]:
            return JSONResponse(status_code=503, content={"error": "model not loaded"})
        if not (MIN_SIDE <= req.height <= MAX_SIDE and MIN_SIDE <= req.width <= MAX_SIDE):
            return JSONResponse(status_code=422,
                                content={"error": f"resolution must be within "
                                                  f"[{MIN_SIDE}, {MAX_SIDE}]"})
        if not (0.0 < req.t_min < req.t_max < 1.0):
            return JSONResponse(status_code=400,
                                content={"error": "timestep range must satisfy "
                                                  "0 < t_min < t_max < 1"})
        try:
            raw = base64.b64decode(req.image, validate=True)
        except Exception:
            return JSONResponse(status_code=400, content={"error": "bad image base64"})
        expected = req.height * req.width * 3
        if len(raw) != expected:
            return JSONResponse(status_code=400,
                                content={"error": f"image payload has {len(raw)} bytes, "
                                                  f"expected {expected}"})
        image = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        image = image.reshape(req.height, req.width, 3) / 255.0
        keypoints = (np.asarray(req.pose_keypoints, dtype=np.float64)
                     if req.pose_keypoints else None)
        result = backend.sds_gradient(GradRequest(
            image=image, prompt=req.prompt, negative_prompt=req.negative_prompt,
            pose_keypoints=keypoints, t_min=req.t_min, t_max=req.t_max,
            guidance_scale=req.guidance_scale, seed=req.seed,
            latent_space=req.latent_space))
        grad = np.ascontiguousarray(result.grad.astype("<f4"))
        if grad.shape != (req.height, req.width, 3) or not np.all(np.isfinite(grad)):
            return JSONResponse(status_code=500,
                                content={"error": "backend produced an invalid gradient"})
        return SdsResponse(
            grad=base64.b64encode(grad.tobytes()).decode("ascii"),
            w_t=result.w_t, t_sampled=result.t_sampled,
            model_id=backend.model_id).model_dump()

    return app
