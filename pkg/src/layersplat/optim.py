"""Adam over surfel parameters plus densification and pruning.

Constrained parameters are optimized in unconstrained space (log scales,
logit opacity) and written back through their squash functions, so layer
invariants hold after every step. Densification follows splatting practice:
clone small / split large surfels whose accumulated screen-space positional
gradient exceeds a threshold; the try-on scaling constraint additionally
splits any surfel wider than the threshold and clips the children.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Camera, GaussianLayer
from .quaternions import normalize_quat, quat_to_rotmat
from .rasterizer import LayerGrads

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

OPACITY_CLAMP = 1e-4  # keeps logit finite when loading hard 0/1 opacities
PARAM_GROUPS = ("mu", "q", "s", "opacity", "color")


@dataclass
class LearningRates:
    mu: float = 1.6e-4
    q: float = 1e-3
    s: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    mu_final_factor: float = 0.01  # exponential decay target for positions

    def at(self, step: int, total: int) -> dict:
        frac = min(max(step / max(total, 1), 0.0), 1.0)
        return {
            "mu": self.mu * self.mu_final_factor ** frac,
            "q": self.q,
            "s": self.s,
            "opacity": self.opacity,
            "color": self.color,
        }


def _raw_params(layer: GaussianLayer) -> dict:
    op = np.clip(layer.opacity, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    return {
        "mu": layer.mu.copy(),
        "q": layer.q.copy(),
        "s": np.log(layer.s),
        "opacity": np.log(op / (1.0 - op)),
        "color": layer.color.copy(),
    }


def _raw_grads(layer: GaussianLayer, grads: LayerGrads) -> dict:
    op = np.clip(layer.opacity, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    return {
        "mu": grads.mu,
        "q": grads.q,
        "s": grads.s * layer.s,                      # d s / d log s = s
        "opacity": grads.opacity * op * (1.0 - op),  # sigmoid chain
        "color": grads.color,
    }


@dataclass
class OptimState:
    step: int
    m: dict
    v: dict
    grad_accum: np.ndarray   # screen-scaled positional gradient magnitudes
    accum_count: np.ndarray
    max_scale: np.ndarray

    @staticmethod
    def for_layer(layer: GaussianLayer) -> "OptimState":
        n = layer.n
        shapes = {"mu": (n, 3), "q": (n, 4), "s": (n, 2), "opacity": (n,), "color": (n, 3)}
        return OptimState(step=0,
                          m={k: np.zeros(v) for k, v in shapes.items()},
                          v={k: np.zeros(v) for k, v in shapes.items()},
                          grad_accum=np.zeros(n),
                          accum_count=np.zeros(n, dtype=np.int64),
                          max_scale=layer.s.max(axis=1).copy())

    def check_aligned(self, layer: GaussianLayer) -> None:
        if self.grad_accum.shape[0] != layer.n:
            raise ValueError(
                f"optimizer state rows ({self.grad_accum.shape[0]}) out of sync with layer ({layer.n})")


def adam_step(layer: GaussianLayer, grads: LayerGrads, state: OptimState,
              lrs: dict) -> None:
    """One Adam update over all parameter groups; renormalizes quaternions
    and clips colors afterwards."""
    if layer.frozen:
        raise ValueError(f"layer {layer.label!r} is frozen")
    state.check_aligned(layer)
    for name in PARAM_GROUPS:
        arr = getattr(grads, name)
        if not np.all(np.isfinite(arr)):
            bad = int(np.nonzero(~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1))[0][0])
            raise FloatingPointError(f"non-finite gradient for {name} at surfel {bad}")

    state.step += 1
    t = state.step
    raw = _raw_params(layer)
    rg = _raw_grads(layer, grads)
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in PARAM_GROUPS:
        g = rg[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        raw[name] = raw[name] - lrs[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    layer.mu[:] = raw["mu"]
    layer.q[:] = normalize_quat(raw["q"])
    layer.s[:] = np.exp(raw["s"])
    layer.opacity[:] = 1.0 / (1.0 + np.exp(-raw["opacity"]))
    layer.color[:] = np.clip(raw["color"], 0.0, 1.0)
    state.max_scale = np.maximum(state.max_scale, layer.s.max(axis=1))
    layer.bump_version()


def accumulate_densify_stats(state: OptimState, grads: LayerGrads,
                             layer: GaussianLayer, camera: Camera) -> None:
    """Track per-surfel positional gradients in screen scale (pixels):
    ||dL/dmu|| * f / z of the surfel center under the training camera."""
    _, z = camera.project(layer.mu)
    f = 0.5 * (camera.fx + camera.fy)
    scale = f / np.maximum(np.abs(z), 1e-2)
    mag = np.linalg.norm(grads.mu, axis=1) * scale
    state.grad_accum += mag
    state.accum_count += 1


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.03       # screen-scaled positional gradient
    size_threshold: float = 0.02       # clone below, split above (meters)
    prune_opacity: float = 0.01
    scale_split_threshold: Optional[float] = None  # 0.01 enables the try-on constraint
    split_offset_sigma: float = 0.5


@dataclass
class DensifyReport:
    n_cloned: int = 0
    n_split: int = 0
    n_constraint_split: int = 0
    n_pruned: int = 0
    n_after: int = 0


def _split_rows(layer: GaussianLayer, idx: np.ndarray, offset_sigma: float,
                major_scale_div: float, clip_to: Optional[float]):
    """Two children per split surfel, displaced +-offset_sigma along the
    major axis; returns the children's parameter arrays."""
    R = quat_to_rotmat(layer.q[idx])
    major = np.argmax(layer.s[idx], axis=1)
    axis = np.where(major[:, None] == 0, R[:, :, 0], R[:, :, 1])
    sigma = layer.s[idx, major]
    off = offset_sigma * sigma[:, None] * axis
    mu = np.concatenate([layer.mu[idx] + off, layer.mu[idx] - off])
    s = layer.s[idx].copy()
    s[np.arange(len(idx)), major] /= major_scale_div
    if clip_to is not None:
        s = np.minimum(s, clip_to)
    s = np.concatenate([s, s])
    q = np.concatenate([layer.q[idx], layer.q[idx]])
    opacity = np.concatenate([layer.opacity[idx], layer.opacity[idx]])
    color = np.concatenate([layer.color[idx], layer.color[idx]])
    return mu, q, s, opacity, color


def densify_and_prune(layer: GaussianLayer, state: OptimState,
                      cfg: DensifyConfig) -> DensifyReport:
    """Gradient-driven clone/split, optional scaling-constraint split with
    clipping, then opacity pruning. Optimizer state rows follow every edit;
    new surfels start with zeroed moments."""
    if layer.frozen:
        raise ValueError(f"layer {layer.label!r} is frozen")
    state.check_aligned(layer)
    report = DensifyReport()

    avg = state.grad_accum / np.maximum(state.accum_count, 1)
    smax = layer.s.max(axis=1)
    hot = avg > cfg.grad_threshold
    split_mask = hot & (smax > cfg.size_threshold)
    if cfg.scale_split_threshold is not None:
        constraint_mask = (smax > cfg.scale_split_threshold) & ~split_mask
    else:
        constraint_mask = np.zeros(layer.n, dtype=bool)
    clone_mask = hot & ~split_mask & ~constraint_mask

    keep_mask = ~(split_mask | constraint_mask)
    parts = {k: [getattr(layer, k)[keep_mask]] for k in PARAM_GROUPS}

    if clone_mask.any():
        idx = np.nonzero(clone_mask)[0]
        for k in PARAM_GROUPS:
            parts[k].append(getattr(layer, k)[idx])
        report.n_cloned = int(idx.size)

    clip_to = cfg.scale_split_threshold
    if split_mask.any():
        idx = np.nonzero(split_mask)[0]
        mu, q, s, op, col = _split_rows(layer, idx, cfg.split_offset_sigma, 1.6, clip_to)
        for k, arr in zip(PARAM_GROUPS, (mu, q, s, op, col)):
            parts[k].append(arr)
        report.n_split = int(idx.size)
    if constraint_mask.any():
        idx = np.nonzero(constraint_mask)[0]
        mu, q, s, op, col = _split_rows(layer, idx, cfg.split_offset_sigma, 2.0, clip_to)
        for k, arr in zip(PARAM_GROUPS, (mu, q, s, op, col)):
            parts[k].append(arr)
        report.n_constraint_split = int(idx.size)

    for k in PARAM_GROUPS:
        merged = np.concatenate(parts[k])
        setattr(layer, k, np.ascontiguousarray(merged))

    n_kept = int(keep_mask.sum())
    for name in PARAM_GROUPS:
        for d in (state.m, state.v):
            old = d[name]
            fresh = np.zeros((layer.n - n_kept,) + old.shape[1:])
            d[name] = np.concatenate([old[keep_mask], fresh])

    # Prune transparent surfels.
    prune = layer.opacity < cfg.prune_opacity
    if prune.any():
        keep = ~prune
        report.n_pruned = int(prune.sum())
        for k in PARAM_GROUPS:
            setattr(layer, k, np.ascontiguousarray(getattr(layer, k)[keep]))
        for name in PARAM_GROUPS:
            state.m[name] = state.m[name][keep]
            state.v[name] = state.v[name][keep]

    state.grad_accum = np.zeros(layer.n)
    state.accum_count = np.zeros(layer.n, dtype=np.int64)
    state.max_scale = layer.s.max(axis=1).copy()
    report.n_after = layer.n
    layer.bump_version()
    return report


def enforce_scale_constraint(layer: GaussianLayer, state: OptimState,
                             threshold: float) -> int:
    """Split-and-clip every surfel wider than ``threshold``; used at the end
    of constrained stages so no surfel exceeds the limit."""
    cfg = DensifyConfig(grad_threshold=np.inf, prune_opacity=-1.0,
                        scale_split_threshold=threshold)
    report = densify_and_prune(layer, state, cfg)
    return report.n_constraint_split
