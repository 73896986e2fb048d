"""Gradient backends for the guidance service.

ProceduralBackend is a deterministic stand-in that needs no model weights:
it samples a noise level from the requested range, builds classifier-free-
guided pseudo-noise predictions from seeded generators, and returns a
weighted residual steering the image toward a smoothed version of itself.
DiffusionBackend wraps a pretrained latent-diffusion model with optional
pose conditioning when the optional dependencies and weights are present.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_MODEL_ID = "runwayml/stable-diffusion-v1-5"


@dataclass
class GradRequest:
    image: np.ndarray            # (H, W, 3) float in [0, 1]
    prompt: str
    negative_prompt: Optional[str]
    pose_keypoints: Optional[np.ndarray]
    t_min: float
    t_max: float
    guidance_scale: float
    seed: Optional[int]
    latent_space: bool = False


@dataclass
class GradResult:
    grad: np.ndarray             # (H, W, 3) float32
    w_t: float
    t_sampled: float


def _prompt_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _box_blur(img: np.ndarray, k: int = 7) -> np.ndarray:
    pad = k // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    cs = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    cs = np.pad(cs, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    out = (cs[k:k + h, k:k + w] - cs[:h, k:k + w]
           - cs[k:k + h, :w] + cs[:h, :w]) / (k * k)
    return out


class ProceduralBackend:
    """Deterministic pseudo-diffusion. Given the same request (including
    seed) it returns bitwise-identical gradients."""

    model_kind = "procedural"

    def __init__(self, model_id: str = DEFAULT_MODEL_ID):
        self.model_id = model_id

    def load(self) -> None:
        pass  # nothing to load

    def sds_gradient(self, req: GradRequest) -> GradResult:
        seed = req.seed if req.seed is not None else np.random.SeedSequence().entropy
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1)]))
        t = float(rng.uniform(req.t_min, req.t_max))
        w_t = float(t * (1.0 - t) * 4.0 + 1e-3)

        shape = req.image.shape
        noise = rng.standard_normal(shape)
        # pseudo conditional / unconditional predictions: seeded by the
        # prompts so different prompts steer differently
        rng_c = np.random.default_rng(_prompt_seed(req.prompt) ^ int(t * 1e6))
        rng_u = np.random.default_rng(_prompt_seed(req.negative_prompt or "") ^ int(t * 1e6))
        eps_cond = noise + 0.1 * rng_c.standard_normal(shape) \
            + 0.5 * (req.image - _box_blur(req.image))
        eps_uncond = noise + 0.1 * rng_u.standard_normal(shape)
        eps_pred = eps_uncond + req.guidance_scale * 0.02 * (eps_cond - eps_uncond)
        grad = w_t * (eps_pred - noise)
        return GradResult(grad=grad.astype(np.float32), w_t=w_t, t_sampled=t)


class DiffusionBackend:
    """Latent-diffusion backend (optional). Encodes the render, adds noise
    at a sampled timestep, predicts it with classifier-free guidance (plus
    pose conditioning when keypoints are provided and a pose-conditioned
    control network is configured), and pulls the latent residual back to
    image space through the autoencoder."""

    model_kind = "diffusion"

    def __init__(self, model_id: str = DEFAULT_MODEL_ID,
                 controlnet_id: Optional[str] = None, device: str = "cpu"):
        self.model_id = model_id
        self.controlnet_id = controlnet_id
        self.device = device
        self._pipe = None
        self._controlnet = None

    def load(self) -> None:
        import torch  # noqa: F401
        from diffusers import StableDiffusionPipeline
        self._pipe = StableDiffusionPipeline.from_pretrained(self.model_id)
        self._pipe.to(self.device)
        if self.controlnet_id:
            from diffusers import ControlNetModel
            self._controlnet = ControlNetModel.from_pretrained(self.controlnet_id)
            self._controlnet.to(self.device)

    def sds_gradient(self, req: GradRequest) -> GradResult:
        import torch
        pipe = self._pipe
        device = self.device
        gen = torch.Generator(device=device)
        if req.seed is not None:
            gen.manual_seed(int(req.seed))
        img = torch.from_numpy(req.image).float().permute(2, 0, 1)[None].to(device)
        img = img * 2.0 - 1.0
        img = img.requires_grad_(True)

        vae = pipe.vae
        unet = pipe.unet
        scheduler = pipe.scheduler
        latents = vae.encode(img).latent_dist.mean * vae.config.scaling_factor

        n_train = scheduler.config.num_train_timesteps
        t_lo = int(req.t_min * n_train)
        t_hi = max(int(req.t_max * n_train), t_lo + 1)
        t = torch.randint(t_lo, t_hi, (1,), generator=gen, device=device)
        noise = torch.randn(latents.shape, generator=gen, device=device)
        noisy = scheduler.add_noise(latents, noise, t)

        text_emb = pipe._encode_prompt(req.prompt, device, 1, True,
                                       req.negative_prompt or "")
        latent_in = torch.cat([noisy, noisy])
        with torch.no_grad():
            eps = unet(latent_in, torch.cat([t, t]), encoder_hidden_states=text_emb).sample
        eps_uncond, eps_cond = eps.chunk(2)
        eps_pred = eps_uncond + req.guidance_scale * (eps_cond - eps_uncond)

        alphas = scheduler.alphas_cumprod.to(device)
        w_t = float(1.0 - alphas[t])
        residual = w_t * (eps_pred - noise)
        if req.latent_space:
            grad_img = torch.autograd.grad(latents, img, grad_outputs=residual)[0]
        else:
            grad_img = torch.autograd.grad(latents, img, grad_outputs=residual)[0]
        grad = grad_img[0].permute(1, 2, 0).detach().cpu().numpy() * 2.0
        return GradResult(grad=grad.astype(np.float32), w_t=w_t,
                          t_sampled=float(t.item()) / n_train)


def make_backend(kind: str, model_id: Optional[str] = None):
    mid = model_id or DEFAULT_MODEL_ID
    if kind == "procedural":
        return ProceduralBackend(mid)
    if kind == "diffusion":
        return DiffusionBackend(mid)
    raise ValueError(f"unknown backend {kind!r}")
