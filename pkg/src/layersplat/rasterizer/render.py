"""Tiled differentiable forward rendering and the analytic backward pass.

``render`` composites one or more Gaussian layers front-to-back per pixel
and retains per-pixel intersection records; ``backward`` transports
arbitrary image-space (and per-intersection) adjoints to per-splat
parameter gradients. ``render_reference`` in reference.py is the exact
brute-force oracle for both.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import Camera, GaussianLayer, SegColors
from ..quaternions import quat_to_rotmat
from . import kernels

TILE_SIZE = 16
DEFAULT_NEAR = 0.01
# gauss_value cutoff at the 3-sigma ellipse boundary.
CUTOFF = float(np.exp(-0.5 * kernels.R2_MAX))


@dataclass
class IntersectionSet:
    """CSR layout of per-pixel intersection records, ascending in z."""

    offsets: np.ndarray   # (H*W + 1,) int64, row-major pixels
    gauss: np.ndarray     # (K,) int64, global surfel index
    omega: np.ndarray     # (K,) blend weights
    z: np.ndarray         # (K,) camera-space depth
    normal: np.ndarray    # (K, 3) camera-oriented world-space splat normals

    @property
    def total(self) -> int:
        return int(self.gauss.shape[0])

    def pixel(self, py: int, px: int, width: int) -> slice:
        p = py * width + px
        return slice(int(self.offsets[p]), int(self.offsets[p + 1]))


@dataclass
class RenderOutput:
    rgb: Optional[np.ndarray]      # (H, W, 3)
    depth: np.ndarray              # (H, W) camera-space mean depth, 0 where empty
    normal: np.ndarray             # (H, W, 3)
    alpha: np.ndarray              # (H, W)
    seg: Optional[np.ndarray]      # (H, W, 3) in segmentation mode
    intersections: IntersectionSet


@dataclass
class RenderContext:
    """Everything backward needs; valid only while the rendered layers are
    unmodified (checked via per-layer version counters)."""

    layers: list
    layer_versions: list
    layer_slices: list            # per-layer (start, stop) in the concatenation
    camera: Camera
    near: float
    background: np.ndarray
    seg_background: np.ndarray
    do_rgb: bool
    do_seg: bool
    mu: np.ndarray
    q: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    nrm: np.ndarray
    s: np.ndarray
    opacity: np.ndarray
    col_rgb: np.ndarray
    col_seg: np.ndarray
    frozen: np.ndarray            # (N,) uint8
    intersections: IntersectionSet = None
    max_per_pixel: int = 0
    has_records: bool = True

    def check_fresh(self) -> None:
        for layer, ver in zip(self.layers, self.layer_versions):
            if layer.version != ver:
                raise StaleContextError(
                    f"layer {layer.label!r} changed (version {layer.version} != {ver}); re-render first")


class StaleContextError(RuntimeError):
    pass


@dataclass
class RenderGrads:
    """Adjoints accepted by ``backward``. Image-space gradients match the
    RenderOutput shapes; omega/z/n align with the intersection records."""

    rgb: Optional[np.ndarray] = None
    seg: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None

    def scaled(self, factor: float) -> "RenderGrads":
        def f(a):
            return None if a is None else factor * a
        return RenderGrads(rgb=f(self.rgb), seg=f(self.seg), depth=f(self.depth),
                           normal=f(self.normal), alpha=f(self.alpha),
                           omega=f(self.omega), z=f(self.z), n=f(self.n))

    @staticmethod
    def accumulate(terms: Sequence[tuple[float, "RenderGrads"]]) -> "RenderGrads":
        """Weighted sum of gradient bundles (None-aware)."""
        out = RenderGrads()
        for wgt, g in terms:
            for name in ("rgb", "seg", "depth", "normal", "alpha", "omega", "z", "n"):
                cur = getattr(g, name)
                if cur is None:
                    continue
                prev = getattr(out, name)
                setattr(out, name, wgt * cur if prev is None else prev + wgt * cur)
        return out


@dataclass
class LayerGrads:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    def __iadd__(self, other: "LayerGrads") -> "LayerGrads":
        self.mu += other.mu
        self.q += other.q
        self.s += other.s
        self.opacity += other.opacity
        self.color += other.color
        return self

    @staticmethod
    def zeros(n: int) -> "LayerGrads":
        return LayerGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)),
                          np.zeros(n), np.zeros((n, 3)))


@dataclass
class GaussianGrads:
    """Per-layer parameter gradients aligned with the rendered layers."""

    per_layer: list

    def __getitem__(self, i: int) -> LayerGrads:
        return self.per_layer[i]

    def assert_finite(self) -> None:
        for i, lg in enumerate(self.per_layer):
            for name in ("mu", "q", "s", "opacity", "color"):
                arr = getattr(lg, name)
                if not np.all(np.isfinite(arr)):
                    raise FloatingPointError(f"non-finite gradient in layer {i} field {name}")


def _prepare_scene(layers: Sequence[GaussianLayer], seg_colors: Optional[SegColors]):
    slices = []
    start = 0
    mu, q, s, opacity, col_rgb, col_seg, frozen = [], [], [], [], [], [], []
    for layer in layers:
        n = layer.n
        slices.append((start, start + n))
        start += n
        mu.append(layer.mu)
        q.append(layer.q)
        s.append(layer.s)
        opacity.append(layer.opacity)
        col_rgb.append(layer.color)
        if seg_colors is not None:
            col_seg.append(np.tile(seg_colors.for_label(layer.label), (n, 1)))
        frozen.append(np.full(n, 1 if layer.frozen else 0, dtype=np.uint8))
    mu = np.ascontiguousarray(np.concatenate(mu))
    q = np.ascontiguousarray(np.concatenate(q))
    R = quat_to_rotmat(q)
    tu = np.ascontiguousarray(R[:, :, 0])
    tv = np.ascontiguousarray(R[:, :, 1])
    nrm = np.ascontiguousarray(R[:, :, 2])
    s = np.ascontiguousarray(np.concatenate(s))
    opacity = np.ascontiguousarray(np.concatenate(opacity))
    col_rgb = np.ascontiguousarray(np.concatenate(col_rgb))
    if seg_colors is not None:
        col_seg = np.ascontiguousarray(np.concatenate(col_seg))
    else:
        col_seg = np.zeros_like(col_rgb)
    frozen = np.concatenate(frozen)
    return slices, mu, q, tu, tv, nrm, s, opacity, col_rgb, col_seg, frozen


def _bin_tiles(mu, tu, tv, s, camera: Camera, near: float):
    """Conservative screen bboxes from the projected 3-sigma rectangle
    corners, expanded to tile ranges. Returns (tile_starts, pair_gauss,
    per-splat integer pixel bboxes, n_tiles_x, n_tiles_y)."""
    H, W = camera.height, camera.width
    n_tiles_x = (W + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (H + TILE_SIZE - 1) // TILE_SIZE
    n = mu.shape[0]
    if n == 0:
        return (np.zeros(n_tiles_x * n_tiles_y + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), np.zeros((0, 4), dtype=np.int64),
                n_tiles_x, n_tiles_y)

    eu = 3.0 * s[:, 0:1] * tu
    ev = 3.0 * s[:, 1:2] * tv
    corners = np.stack([mu + eu + ev, mu + eu - ev, mu - eu + ev, mu - eu - ev], axis=1)
    flat = corners.reshape(-1, 3)
    pix, z = camera.project(flat)
    pix = pix.reshape(n, 4, 2)
    z = z.reshape(n, 4)

    all_behind = np.all(z <= near, axis=1)
    any_behind = np.any(z <= near, axis=1) & ~all_behind

    x0 = np.floor(pix[:, :, 0].min(axis=1)) - 1
    x1 = np.ceil(pix[:, :, 0].max(axis=1)) + 1
    y0 = np.floor(pix[:, :, 1].min(axis=1)) - 1
    y1 = np.ceil(pix[:, :, 1].max(axis=1)) + 1
    # Splats that straddle the near plane get a conservative full-image bbox.
    x0[any_behind] = 0.0
    y0[any_behind] = 0.0
    x1[any_behind] = W
    y1[any_behind] = H

    px_bbox = np.stack([np.floor(x0), np.ceil(x1), np.floor(y0), np.ceil(y1)],
                       axis=1).astype(np.int64)

    tx0 = np.clip(np.floor(x0 / TILE_SIZE), 0, n_tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1 / TILE_SIZE), 0, n_tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0 / TILE_SIZE), 0, n_tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1 / TILE_SIZE), 0, n_tiles_y - 1).astype(np.int64)

    visible = (~all_behind) & (x1 >= 0) & (x0 < W) & (y1 >= 0) & (y0 < H)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return (np.zeros(n_tiles_x * n_tiles_y + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), px_bbox, n_tiles_x, n_tiles_y)

    counts = (tx1[idx] - tx0[idx] + 1) * (ty1[idx] - ty0[idx] + 1)
    rep = np.repeat(idx, counts)
    # Per-splat local tile enumeration.
    starts = np.concatenate([[0], np.cumsum(counts)])
    local = np.arange(counts.sum(), dtype=np.int64) - np.repeat(starts[:-1], counts)
    w_tiles = (tx1[idx] - tx0[idx] + 1)
    wrep = np.repeat(w_tiles, counts)
    lx = local % wrep
    ly = local // wrep
    tiles = (np.repeat(ty0[idx], counts) + ly) * n_tiles_x + np.repeat(tx0[idx], counts) + lx

    order = np.argsort(tiles, kind="stable")
    tiles = tiles[order]
    pair_gauss = rep[order]
    tile_starts = np.zeros(n_tiles_x * n_tiles_y + 1, dtype=np.int64)
    np.add.at(tile_starts, tiles + 1, 1)
    np.cumsum(tile_starts, out=tile_starts)
    return tile_starts, pair_gauss, px_bbox, n_tiles_x, n_tiles_y


def render(layers: Sequence[GaussianLayer], camera: Camera, mode: str = "rgb",
           seg_colors: Optional[SegColors] = None,
           background: Optional[np.ndarray] = None,
           near: float = DEFAULT_NEAR,
           keep_records: bool = True) -> tuple[RenderOutput, RenderContext]:
    """Composite ``layers`` front-to-back under ``camera``.

    mode: "rgb", "seg", or "rgb+seg". Segmentation modes require
    ``seg_colors``; each splat then renders with its layer's uniform color
    and the background composites to v_bg. ``keep_records=False`` skips the
    intersection-record pass (no backward, no per-intersection losses).
    """
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

    (slices, mu, q, tu, tv, nrm, s, opacity,
     col_rgb, col_seg, frozen) = _prepare_scene(layers, seg_colors)
    tile_starts, pair_gauss, px_bbox, ntx, nty = _bin_tiles(mu, tu, tv, s, camera, near)

    out_rgb = np.tile(bg_rgb, (H, W, 1))
    out_seg = np.tile(bg_seg, (H, W, 1))
    out_depth = np.zeros((H, W))
    out_normal = np.zeros((H, W, 3))
    out_alpha = np.zeros((H, W))
    out_count = np.zeros((H, W), dtype=np.int64)
    o = camera.center
    kernels.forward_tiles(mu, tu, tv, nrm, s, opacity, col_rgb, col_seg,
                          tile_starts, pair_gauss, px_bbox, ntx, nty, TILE_SIZE, H, W,
                          camera.rotation, o[0], o[1], o[2],
                          camera.fx, camera.fy, camera.cx, camera.cy, near,
                          bg_rgb, bg_seg, do_rgb, do_seg,
                          out_rgb, out_seg, out_depth, out_normal, out_alpha, out_count)

    offsets = np.zeros(H * W + 1, dtype=np.int64)
    if keep_records:
        np.cumsum(out_count.ravel(), out=offsets[1:])
    total = int(offsets[-1])
    rec_gauss = np.zeros(total, dtype=np.int64)
    rec_omega = np.zeros(total)
    rec_z = np.zeros(total)
    rec_normal = np.zeros((total, 3))
    if keep_records:
        kernels.fill_records(mu, tu, tv, nrm, s, opacity, tile_starts, pair_gauss,
                             px_bbox, ntx, nty, TILE_SIZE, H, W,
                             camera.rotation, o[0], o[1], o[2],
                             camera.fx, camera.fy, camera.cx, camera.cy, near,
                             offsets, rec_gauss, rec_omega, rec_z, rec_normal)

    isect = IntersectionSet(offsets, rec_gauss, rec_omega, rec_z, rec_normal)
    out = RenderOutput(rgb=out_rgb if do_rgb else None, depth=out_depth,
                       normal=out_normal, alpha=out_alpha,
                       seg=out_seg if do_seg else None, intersections=isect)
    ctx = RenderContext(layers=layers, layer_versions=[l.version for l in layers],
                        layer_slices=slices, camera=camera, near=near,
                        background=bg_rgb, seg_background=bg_seg,
                        do_rgb=do_rgb, do_seg=do_seg,
                        mu=mu, q=q, tu=tu, tv=tv, nrm=nrm, s=s, opacity=opacity,
                        col_rgb=col_rgb, col_seg=col_seg, frozen=frozen,
                        intersections=isect,
                        max_per_pixel=max(1, int(out_count.max())),
                        has_records=keep_records)
    return out, ctx


def backward(ctx: RenderContext, grads: RenderGrads) -> GaussianGrads:
    """Transport image-space / per-intersection adjoints to parameter
    gradients. Frozen layers receive zeros; output asserted finite."""
    ctx.check_fresh()
    if not ctx.has_records:
        raise ValueError("render was called with keep_records=False; no backward")
    H, W = ctx.camera.height, ctx.camera.width
    isect = ctx.intersections
    n = ctx.mu.shape[0]

    def img(a, shape):
        if a is None:
            return np.zeros(shape), False
        a = np.asarray(a, dtype=np.float64)
        if a.shape != shape:
            raise ValueError(f"gradient shape {a.shape} does not match render shape {shape}")
        return np.ascontiguousarray(a), True

    grad_rgb, has_rgb = img(grads.rgb, (H, W, 3))
    grad_seg, has_seg = img(grads.seg, (H, W, 3))
    grad_depth, has_depth = img(grads.depth, (H, W))
    grad_normal, has_normal = img(grads.normal, (H, W, 3))
    grad_alpha, has_alpha = img(grads.alpha, (H, W))
    if has_rgb and not ctx.do_rgb:
        raise ValueError("rgb gradient supplied for a segmentation-only render")
    if has_seg and not ctx.do_seg:
        raise ValueError("seg gradient supplied for an rgb-only render")
    k = isect.total
    grad_omega, has_omega = img(grads.omega, (k,))
    grad_z, has_z = img(grads.z, (k,))
    grad_n, has_n = img(grads.n, (k, 3))

    nb = kernels.N_BACKWARD_BLOCKS
    g_mu = np.zeros((nb, n, 3))
    g_q = np.zeros((nb, n, 4))
    g_s = np.zeros((nb, n, 2))
    g_opacity = np.zeros((nb, n))
    g_color = np.zeros((nb, n, 3))
    o = ctx.camera.center
    kernels.backward_records(ctx.mu, ctx.q, ctx.tu, ctx.tv, ctx.nrm, ctx.s,
                             ctx.opacity, ctx.col_rgb, ctx.col_seg, ctx.frozen,
                             isect.offsets, isect.gauss, isect.omega, isect.z,
                             H, W, ctx.camera.rotation, o[0], o[1], o[2],
                             ctx.camera.fx, ctx.camera.fy, ctx.camera.cx, ctx.camera.cy,
                             ctx.background, ctx.seg_background,
                             grad_rgb, grad_seg, grad_depth, grad_normal, grad_alpha,
                             grad_omega, grad_z, grad_n,
                             has_rgb, has_seg, has_depth, has_normal, has_alpha,
                             has_omega, has_z, has_n,
                             ctx.max_per_pixel,
                             g_mu, g_q, g_s, g_opacity, g_color)
    mu_t = g_mu.sum(axis=0)
    q_t = g_q.sum(axis=0)
    s_t = g_s.sum(axis=0)
    op_t = g_opacity.sum(axis=0)
    col_t = g_color.sum(axis=0)

    per_layer = []
    for (a, b), layer in zip(ctx.layer_slices, ctx.layers):
        if layer.frozen:
            per_layer.append(LayerGrads.zeros(layer.n))
        else:
            per_layer.append(LayerGrads(mu_t[a:b], q_t[a:b], s_t[a:b], op_t[a:b], col_t[a:b]))
    out = GaussianGrads(per_layer)
    out.assert_finite()
    return out


def intersect(g, origin, direction, near: float = 1e-9,
              cutoff: float = CUTOFF):
    """Single ray-splat intersection.

    Returns (u, v, z, gauss_value) with z the distance along the normalized
    ray, or None when the ray is parallel to the plane, behind the near
    plane, or the footprint falls below the cutoff.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    d = d / np.linalg.norm(d)
    R = quat_to_rotmat(g.q)
    n = R[:, 2]
    denom = float(d @ n)
    if abs(denom) < kernels.DENOM_EPS:
        return None
    t = float((g.mu - origin) @ n) / denom
    if t <= near:
        return None
    x = origin + t * d
    w = x - g.mu
    u = float(w @ R[:, 0]) / g.s[0]
    v = float(w @ R[:, 1]) / g.s[1]
    gauss_value = float(np.exp(-0.5 * (u * u + v * v)))
    if gauss_value < cutoff:
        return None
    return u, v, t, gauss_value
