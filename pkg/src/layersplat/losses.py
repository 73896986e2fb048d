"""Training losses: photometric (L1 + D-SSIM), depth distortion (plain and
seen/occluded split), normal consistency against depth-derived normals,
segmentation, and guidance-gradient injection.

Every term returns a LossTerm holding its scalar and the exact gradients
with respect to its immediate inputs (rendered images and/or per-
intersection omega/z/normal arrays); the rasterizer backward transports
them to splat parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Camera, SegColors
from .guidance import (GuidanceRequest, GuidanceResponse, GuidanceUnavailable,
                       mock_guidance)
from .imageproc import ssim_with_grad
from .rasterizer import IntersectionSet, RenderGrads, RenderOutput

__all__ = [
    "LossTerm", "rgb_loss", "depth_distortion", "depth_distortion_split",
    "normal_consistency", "segmentation_loss", "guidance_gradient",
    "mock_guidance",
]

log = logging.getLogger(__name__)

# Pixels participate in the normal-consistency term only where enough
# opacity accumulated to trust the depth map.
NORMAL_ALPHA_MIN = 0.5


@dataclass
class LossTerm:
    """A scalar plus the gradients for the render(s) it touched.

    ``grads`` aligns with the primary render; ``dummy_grads`` (split depth
    distortion only) aligns with the dummy-composited render.
    """

    value: float
    grads: RenderGrads
    weight: float = 1.0
    dummy_grads: Optional[RenderGrads] = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError("loss value is not finite")


def rgb_loss(rendered: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
             lambda_c: float = 0.2) -> LossTerm:
    """(1 - lambda_c) * L1 + lambda_c * D-SSIM over supervised pixels,
    D-SSIM = (1 - SSIM) / 2."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError("rendered and ground-truth images must share a shape")
    if not 0.0 <= lambda_c <= 1.0:
        raise ValueError("lambda_c must lie in [0, 1]")
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != rendered.shape[:2]:
            raise ValueError("mask shape must match the image")
        if not mask.any():
            raise ValueError("empty mask: no supervised pixels")
        m3 = mask[..., None]
        count = mask.sum() * rendered.shape[2]
    else:
        m3 = np.ones(rendered.shape[:2], dtype=bool)[..., None]
        count = rendered.size

    diff = rendered - gt
    l1 = float(np.abs(diff[np.broadcast_to(m3, diff.shape)]).sum() / count)
    grad = np.where(m3, np.sign(diff), 0.0) / count * (1.0 - lambda_c)
    value = (1.0 - lambda_c) * l1

    if lambda_c > 0.0:
        s, s_grad = ssim_with_grad(rendered, gt,
                                   mask=None if mask is None else mask.astype(np.float64))
        value += lambda_c * (1.0 - s) / 2.0
        grad += lambda_c * (-0.5) * s_grad
    return LossTerm(value=value, grads=RenderGrads(rgb=grad))


def _segment_sums(x: np.ndarray, offsets: np.ndarray):
    """Within-pixel-segment exclusive prefix sums and per-record segment
    totals. Empty segments are handled (offsets may repeat)."""
    lengths = np.diff(offsets)
    cs = np.concatenate([[0.0], np.cumsum(x)])
    excl = cs[:-1] - np.repeat(cs[offsets[:-1]], lengths)
    seg_total = np.repeat(cs[offsets[1:]] - cs[offsets[:-1]], lengths)
    return excl, seg_total


def _segment_vector_sums(vec: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-segment sums of (K, 3) records -> (n_segments, 3)."""
    cs = np.concatenate([np.zeros((1, 3)), np.cumsum(vec, axis=0)])
    return cs[offsets[1:]] - cs[offsets[:-1]]


def _distortion_on_records(isect: IntersectionSet, record_mask: np.ndarray):
    """Pairwise depth-distortion over per-pixel records (sorted by z).

    Returns (value, d/d omega, d/d z) with masked records contributing 0.
    """
    om = np.where(record_mask, isect.omega, 0.0)
    z = isect.z
    offsets = isect.offsets
    if om.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    w_excl, w_tot = _segment_sums(om, offsets)
    oz = om * z
    s_excl, s_tot = _segment_sums(oz, offsets)
    # Records sorted ascending in z: sum_{i<j} 2 w_i w_j (z_j - z_i).
    contrib = om * (z * w_excl - s_excl)
    value = 2.0 * float(contrib.sum())
    w_after = w_tot - w_excl - om
    s_after = s_tot - s_excl - oz
    g_om = 2.0 * (z * w_excl - s_excl + s_after - z * w_after)
    g_z = 2.0 * om * (w_excl - w_after)
    g_om = np.where(record_mask, g_om, 0.0)
    g_z = np.where(record_mask, g_z, 0.0)
    return value, g_om, g_z


def _pixel_mask_to_records(isect: IntersectionSet, mask: np.ndarray) -> np.ndarray:
    lengths = np.diff(isect.offsets)
    return np.repeat(mask.ravel(), lengths)


def depth_distortion(out: RenderOutput) -> LossTerm:
    """Per-pixel pairwise penalty concentrating blend weight at one depth."""
    isect = out.intersections
    mask = np.ones(isect.total, dtype=bool)
    value, g_om, g_z = _distortion_on_records(isect, mask)
    return LossTerm(value=value, grads=RenderGrads(omega=g_om, z=g_z))


def depth_distortion_split(out: RenderOutput, seen_mask: np.ndarray,
                           occluded_mask: np.ndarray,
                           dummy_out: RenderOutput) -> LossTerm:
    """Depth distortion split into the seen region of the inner-layer render
    and the occluded region of the dummy-composited render."""
    seen = np.asarray(seen_mask).astype(bool)
    occ = np.asarray(occluded_mask).astype(bool)
    H, W = out.alpha.shape
    if seen.shape != (H, W) or occ.shape != dummy_out.alpha.shape:
        raise ValueError("mask shape does not match the render")
    if np.any(seen & occ):
        raise ValueError("seen and occluded masks must be disjoint")
    v1, g_om1, g_z1 = _distortion_on_records(
        out.intersections, _pixel_mask_to_records(out.intersections, seen))
    v2, g_om2, g_z2 = _distortion_on_records(
        dummy_out.intersections, _pixel_mask_to_records(dummy_out.intersections, occ))
    return LossTerm(value=v1 + v2,
                    grads=RenderGrads(omega=g_om1, z=g_z1),
                    dummy_grads=RenderGrads(omega=g_om2, z=g_z2))


def _backproject_dirs(camera: Camera) -> np.ndarray:
    """(H, W, 3) camera-space directions (x/z, y/z, 1) per pixel center,
    so that point = depth * dir."""
    xs = (np.arange(camera.width, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


def normal_consistency(out: RenderOutput, camera: Camera) -> LossTerm:
    """sum_i omega_i (1 - n_i . N) with N the normal of the depth map.

    N comes from central differences of back-projected camera-space points,
    normalized and oriented toward the camera. Pixels with alpha below
    NORMAL_ALPHA_MIN (at the pixel or any 4-neighbor), border pixels, and
    degenerate cross products are excluded.
    """
    H, W = out.depth.shape
    depth = out.depth
    dirs = _backproject_dirs(camera)
    P = depth[..., None] * dirs  # camera-space points

    ok = out.alpha >= NORMAL_ALPHA_MIN
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, :-2] & ok[1:-1, 2:]
                         & ok[:-2, 1:-1] & ok[2:, 1:-1])

    tx = np.zeros((H, W, 3))
    ty = np.zeros((H, W, 3))
    tx[:, 1:-1] = P[:, 2:] - P[:, :-2]
    ty[1:-1, :] = P[2:] - P[:-2]
    c = np.cross(tx, ty)
    cl = np.linalg.norm(c, axis=-1)
    valid &= cl > 1e-12

    n_cam = np.zeros((H, W, 3))
    n_cam[valid] = c[valid] / cl[valid][:, None]
    # Orient toward the camera: flip where the normal points along the ray.
    sign = np.where((n_cam * P).sum(-1) > 0.0, -1.0, 1.0)
    n_cam *= sign[..., None]
    n_world = n_cam @ camera.rotation  # R^T applied to each vector

    isect = out.intersections
    rec_valid = _pixel_mask_to_records(isect, valid)
    n_px = np.repeat(n_world.reshape(-1, 3), np.diff(isect.offsets), axis=0)
    dots = (isect.normal * n_px).sum(-1)
    terms = np.where(rec_valid, isect.omega * (1.0 - dots), 0.0)
    value = float(terms.sum())

    g_om = np.where(rec_valid, 1.0 - dots, 0.0)
    g_n = np.where(rec_valid[:, None], -isect.omega[:, None] * n_px, 0.0)

    # dL/dN_world per pixel = -sum_i omega_i n_i over its valid records.
    dL_dNw = _segment_vector_sums(
        np.where(rec_valid[:, None], -isect.omega[:, None] * isect.normal, 0.0),
        isect.offsets).reshape(H, W, 3)
    dL_dNc = dL_dNw @ camera.rotation.T  # adjoint of n_world = R^T n_cam
    dL_dNc *= sign[..., None]
    # Through normalization of c.
    chat = np.zeros_like(c)
    chat[valid] = c[valid] / cl[valid][:, None]
    dot = (chat * dL_dNc).sum(-1)
    dL_dc = np.zeros_like(c)
    dL_dc[valid] = (dL_dNc[valid] - chat[valid] * dot[valid][:, None]) / cl[valid][:, None]
    # c = tx x ty  =>  dL/dtx = ty x dL/dc, dL/dty = dL/dc x tx.
    dL_dtx = np.cross(ty, dL_dc)
    dL_dty = np.cross(dL_dc, tx)
    # tx = P(x+1) - P(x-1), ty = P(y+1) - P(y-1).
    dL_dP = np.zeros_like(P)
    dL_dP[:, 2:] += dL_dtx[:, 1:-1]
    dL_dP[:, :-2] -= dL_dtx[:, 1:-1]
    dL_dP[2:, :] += dL_dty[1:-1, :]
    dL_dP[:-2, :] -= dL_dty[1:-1, :]
    grad_depth = (dL_dP * dirs).sum(-1)

    return LossTerm(value=value,
                    grads=RenderGrads(omega=g_om, n=g_n, depth=grad_depth))


def segmentation_loss(seg: np.ndarray, masks: dict, colors: SegColors) -> LossTerm:
    """sum_k || M_k * (S - v_k) ||_1 over body / garment / background."""
    seg = np.asarray(seg, dtype=np.float64)
    H, W = seg.shape[:2]
    wanted = ("body", "garment", "bg")
    if set(masks.keys()) != set(wanted):
        raise ValueError(f"masks must have keys {wanted}")
    stack = np.stack([np.asarray(masks[k]).astype(bool) for k in wanted])
    if stack.shape[1:] != (H, W):
        raise ValueError("mask shape does not match the segmentation image")
    cover = stack.sum(axis=0)
    if np.any(cover > 1):
        raise ValueError("segmentation masks overlap")
    if np.any(cover < 1):
        raise ValueError("segmentation masks do not cover the image")
    value = 0.0
    grad = np.zeros_like(seg)
    for k, m in zip(wanted, stack):
        v = getattr(colors, f"v_{k}")
        d = seg - v[None, None, :]
        value += float(np.abs(d[m]).sum())
        grad[m] = np.sign(d[m])
    return LossTerm(value=value, grads=RenderGrads(seg=grad))


def guidance_gradient(client, request: GuidanceRequest) -> LossTerm:
    """Fetch the guidance (score-distillation) gradient and wrap it as a
    gradient-only term (value reported as 0).

    Raises GuidanceUnavailable after client retries are exhausted; callers
    skip the term for that step.
    """
    response: GuidanceResponse = client.sds_gradient(request)
    grad = np.asarray(response.grad, dtype=np.float64)
    if grad.shape != request.image.shape:
        raise GuidanceUnavailable(
            f"guidance gradient shape {grad.shape} does not match render {request.image.shape}")
    if not np.all(np.isfinite(grad)):
        raise GuidanceUnavailable("guidance gradient contains non-finite values")
    return LossTerm(value=0.0, grads=RenderGrads(rgb=grad))
