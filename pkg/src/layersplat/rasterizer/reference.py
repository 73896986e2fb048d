"""Exact brute-force renderer used as the testing oracle.

Per pixel, every splat in the scene is intersected, all hits are sorted by
depth and composited exactly. No tiling, no bbox culling; the only shared
rules with the tiled path are the 3-sigma footprint cutoff, the near plane
and the transmittance early stop, so the two are comparable to float
accumulation order.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..core import Camera, GaussianLayer, SegColors
from ..quaternions import quat_to_rotmat
from .kernels import DENOM_EPS, R2_MAX, T_EPS
from .render import DEFAULT_NEAR, IntersectionSet, RenderOutput


def render_reference(layers: Sequence[GaussianLayer], camera: Camera,
                     mode: str = "rgb", seg_colors: Optional[SegColors] = None,
                     background: Optional[np.ndarray] = None,
                     near: float = DEFAULT_NEAR) -> RenderOutput:
    """Reference render; intended for scenes up to ~10^3 splats."""
    layers = list(layers)
    if not layers or all(l.n == 0 for l in layers):
        raise ValueError("render needs at least one nonempty layer")
    if mode not in ("rgb", "seg", "rgb+seg"):
        raise ValueError(f"unknown render mode {mode!r}")
    do_rgb = mode in ("rgb", "rgb+seg")
    do_seg = mode in ("seg", "rgb+seg")
    if do_seg and seg_colors is None:
        raise ValueError("segmentation mode requires seg_colors")

    H, W = camera.height, camera.width
    bg_rgb = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    bg_seg = seg_colors.v_bg if seg_colors is not None else np.zeros(3)

    mu = np.concatenate([l.mu for l in layers])
    q = np.concatenate([l.q for l in layers])
    s = np.concatenate([l.s for l in layers])
    opacity = np.concatenate([l.opacity for l in layers])
    col_rgb = np.concatenate([l.color for l in layers])
    if seg_colors is not None:
        col_seg = np.concatenate([
            np.tile(seg_colors.for_label(l.label), (l.n, 1)) for l in layers])
    else:
        col_seg = np.zeros_like(col_rgb)
    frames = quat_to_rotmat(q)           # (N, 3, 3)
    n_g = mu.shape[0]

    o = camera.center
    dirs = camera.pixel_directions().reshape(-1, 3)      # (P, 3)
    # Camera z per unit ray parameter: z = t * (R @ d)_z.
    dz = dirs @ camera.rotation[2]
    n_p = dirs.shape[0]

    # All pixels x all splats, vectorized: (P, N) hit table.
    nrm = frames[:, :, 2]
    denom = dirs @ nrm.T                                  # (P, N)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((mu[None] - o).reshape(1, n_g, 3) * nrm[None]).sum(-1) / denom
    z = t * dz[:, None]
    x = o[None, None] + t[..., None] * dirs[:, None, :]   # (P, N, 3)
    w = x - mu[None]
    u = (w * frames[:, :, 0][None]).sum(-1) / s[:, 0][None]
    v = (w * frames[:, :, 1][None]).sum(-1) / s[:, 1][None]
    r2 = u * u + v * v
    valid = (np.abs(denom) >= DENOM_EPS) & (z > near) & (r2 <= R2_MAX)
    gauss_value = np.exp(-0.5 * r2)

    rgb = np.tile(bg_rgb, (n_p, 1))
    seg = np.tile(bg_seg, (n_p, 1))
    depth = np.zeros(n_p)
    normal = np.zeros((n_p, 3))
    alpha = np.zeros(n_p)
    counts = np.zeros(n_p, dtype=np.int64)
    recs: list[tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []

    flip = np.where(denom > 0.0, -1.0, 1.0)
    for p in range(n_p):
        hit_idx = np.nonzero(valid[p])[0]
        if hit_idx.size == 0:
            continue
        order = hit_idx[np.argsort(z[p, hit_idx], kind="stable")]
        trans = 1.0
        acc_rgb = np.zeros(3)
        acc_seg = np.zeros(3)
        acc_n = np.zeros(3)
        acc_d = 0.0
        acc_a = 0.0
        omegas, zs, gs, ns = [], [], [], []
        for g in order:
            if trans < T_EPS:
                break
            a = opacity[g] * gauss_value[p, g]
            om = a * trans
            acc_rgb += om * col_rgb[g]
            acc_seg += om * col_seg[g]
            sn = flip[p, g] * nrm[g]
            acc_n += om * sn
            acc_d += om * z[p, g]
            acc_a += om
            omegas.append(om)
            zs.append(z[p, g])
            gs.append(g)
            ns.append(sn)
            trans *= 1.0 - a
        rgb[p] = acc_rgb + (1.0 - acc_a) * bg_rgb
        seg[p] = acc_seg + (1.0 - acc_a) * bg_seg
        alpha[p] = acc_a
        if acc_a > 0:
            depth[p] = acc_d / acc_a
        nl = np.linalg.norm(acc_n)
        if nl > 1e-12:
            normal[p] = acc_n / nl
        counts[p] = len(gs)
        recs.append((p, np.array(gs, dtype=np.int64), np.array(omegas),
                     np.array(zs), np.array(ns).reshape(-1, 3)))

    offsets = np.zeros(n_p + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    rec_gauss = np.zeros(total, dtype=np.int64)
    rec_omega = np.zeros(total)
    rec_z = np.zeros(total)
    rec_normal = np.zeros((total, 3))
    for p, gs, oms, zs, ns in recs:
        sl = slice(offsets[p], offsets[p] + gs.size)
        rec_gauss[sl] = gs
        rec_omega[sl] = oms
        rec_z[sl] = zs
        rec_normal[sl] = ns

    isect = IntersectionSet(offsets, rec_gauss, rec_omega, rec_z, rec_normal)
    return RenderOutput(rgb=rgb.reshape(H, W, 3) if do_rgb else None,
                        depth=depth.reshape(H, W),
                        normal=normal.reshape(H, W, 3),
                        alpha=alpha.reshape(H, W),
                        seg=seg.reshape(H, W, 3) if do_seg else None,
                        intersections=isect)
