"""Domain types: surfels, layers, cameras, skinned templates and weight grids.

Layers are stored struct-of-arrays (numpy, float64). They are treated as
immutable value data everywhere except inside the optimizer, which is the
single writer and bumps ``version`` on every mutation so render contexts can
detect staleness.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .quaternions import normalize_quat, quat_to_rotmat, rotmat_to_quat

LAYER_LABELS = ("whole", "body", "garment", "dummy")

# Default initialization values for freshly sampled surfels.
INIT_OPACITY = 0.5
INIT_COLOR = 0.5


@dataclass
class Gaussian2D:
    """A single planar surfel: position, orientation, tangential scales,
    opacity and color."""

    mu: np.ndarray        # (3,) canonical-space position, meters
    q: np.ndarray         # (4,) unit quaternion (w,x,y,z)
    s: np.ndarray         # (2,) tangential scales (s_u, s_v), meters
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) RGB in [0, 1]

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def normal(self) -> np.ndarray:
        """World-space splat normal (third column of the rotation)."""
        return quat_to_rotmat(self.q)[:, 2]

    @property
    def frame(self) -> np.ndarray:
        """3x3 rotation; columns are the u, v and normal axes."""
        return quat_to_rotmat(self.q)


@dataclass
class GaussianLayer:
    """A labeled set of surfels. ``frozen`` layers must never be mutated by
    the optimizer; the renderer returns zero gradients for them."""

    label: str
    mu: np.ndarray        # (N, 3)
    q: np.ndarray         # (N, 4)
    s: np.ndarray         # (N, 2)
    opacity: np.ndarray   # (N,)
    color: np.ndarray     # (N, 3)
    frozen: bool = False
    version: int = 0

    def __post_init__(self):
        if self.label not in LAYER_LABELS:
            raise ValueError(f"unknown layer label {self.label!r}")
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.q = np.ascontiguousarray(self.q, dtype=np.float64).reshape(n, 4)
        self.s = np.ascontiguousarray(self.s, dtype=np.float64).reshape(n, 2)
        self.opacity = np.ascontiguousarray(self.opacity, dtype=np.float64).reshape(n)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(self.mu[i], self.q[i], self.s[i], float(self.opacity[i]), self.color[i])

    def copy(self, frozen: Optional[bool] = None, label: Optional[str] = None) -> "GaussianLayer":
        return GaussianLayer(
            label=self.label if label is None else label,
            mu=self.mu.copy(),
            q=self.q.copy(),
            s=self.s.copy(),
            opacity=self.opacity.copy(),
            color=self.color.copy(),
            frozen=self.frozen if frozen is None else frozen,
        )

    def bump_version(self) -> None:
        """Record a mutation. Only the optimizer should call this."""
        if self.frozen:
            raise ValueError(f"layer {self.label!r} is frozen and must not be mutated")
        self.version += 1


def layer_from_gaussians(gaussians: Sequence[Gaussian2D], label: str = "whole",
                         frozen: bool = False) -> GaussianLayer:
    if len(gaussians) == 0:
        return GaussianLayer(label, np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                             np.zeros(0), np.zeros((0, 3)), frozen=frozen)
    return GaussianLayer(
        label=label,
        mu=np.stack([g.mu for g in gaussians]),
        q=np.stack([g.q for g in gaussians]),
        s=np.stack([g.s for g in gaussians]),
        opacity=np.array([g.opacity for g in gaussians], dtype=np.float64),
        color=np.stack([g.color for g in gaussians]),
        frozen=frozen,
    )


def concat_layers(layers: Iterable[GaussianLayer], label: str = "whole") -> GaussianLayer:
    layers = list(layers)
    return GaussianLayer(
        label=label,
        mu=np.concatenate([l.mu for l in layers]),
        q=np.concatenate([l.q for l in layers]),
        s=np.concatenate([l.s for l in layers]),
        opacity=np.concatenate([l.opacity for l in layers]),
        color=np.concatenate([l.color for l in layers]),
    )


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera image extent must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (max error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def pixel_directions(self) -> np.ndarray:
        """(H, W, 3) normalized world-space ray directions through pixel centers."""
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d_world = d_cam @ self.rotation  # == (R^T @ d_cam^T)^T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return d_world

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) world points; returns ((N, 2) pixel coords, (N,) camera z)."""
        p_cam = points @ self.rotation.T + self.translation
        z = p_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * p_cam[:, 0] / z + self.cx
            py = self.fy * p_cam[:, 1] / z + self.cy
        return np.stack([px, py], axis=-1), z


def look_at_camera(eye: np.ndarray, target: np.ndarray, up: np.ndarray,
                   fx: float, fy: float, cx: float, cy: float,
                   width: int, height: int) -> Camera:
    """Build a camera at ``eye`` looking at ``target`` (OpenCV convention:
    +z forward, +y down in camera space)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        # View direction parallel to up; pick an arbitrary right vector.
        alt = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, alt)
        nrm = np.linalg.norm(right)
    right /= nrm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # world -> camera rows
    t = -R @ eye
    return Camera(fx, fy, cx, cy, width, height, R, t)


@dataclass(frozen=True)
class SegColors:
    """Uniform layer colors for the segmentation render target."""

    v_body: np.ndarray
    v_garment: np.ndarray
    v_bg: np.ndarray

    def __post_init__(self):
        for name in ("v_body", "v_garment", "v_bg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        pairs = [(self.v_body, self.v_garment), (self.v_body, self.v_bg), (self.v_garment, self.v_bg)]
        for a, b in pairs:
            if np.abs(a - b).max() < 0.5:
                raise ValueError("segmentation colors must be pairwise distinct (L-inf >= 0.5)")

    def for_label(self, label: str) -> np.ndarray:
        if label == "garment":
            return self.v_garment
        # whole / body / dummy all count as body-side layers in seg renders
        return self.v_body


DEFAULT_SEG_COLORS = SegColors(
    v_body=np.array([1.0, 0.0, 0.0]),
    v_garment=np.array([0.0, 1.0, 0.0]),
    v_bg=np.array([0.0, 0.0, 0.0]),
)


@dataclass
class SkinnedTemplate:
    """Skeletal body template: mesh, joints, per-vertex skinning weights and
    shape/pose coefficients. Joint count is free; 48 joints (144-dim pose)
    is the full-body convention, the procedural test humanoid uses 16."""

    vertices: np.ndarray       # (N, 3)
    faces: np.ndarray          # (M, 3) int
    joint_positions: np.ndarray  # (J, 3) rest positions
    joint_parents: np.ndarray    # (J,) int, -1 for the root
    weights: np.ndarray        # (N, J) row-stochastic
    beta: np.ndarray = field(default_factory=lambda: np.zeros(10))
    theta: Optional[np.ndarray] = None  # (3J,) per-joint axis-angle, flattened

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.joint_positions = np.ascontiguousarray(self.joint_positions, dtype=np.float64).reshape(-1, 3)
        self.joint_parents = np.ascontiguousarray(self.joint_parents, dtype=np.int64).ravel()
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        if self.theta is None:
            self.theta = np.zeros(3 * self.n_joints)
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self._validate()

    @property
    def n_joints(self) -> int:
        return self.joint_positions.shape[0]

    def _validate(self):
        n, j = self.vertices.shape[0], self.n_joints
        if self.weights.shape != (n, j):
            raise ValueError(f"weights shape {self.weights.shape} != ({n}, {j})")
        if np.any(self.weights < -1e-12):
            raise ValueError("skinning weights must be nonnegative")
        row_err = np.abs(self.weights.sum(axis=1) - 1.0).max() if n else 0.0
        if row_err > 1e-6:
            raise ValueError(f"skinning weight rows must sum to 1 (max error {row_err:.2e})")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face indices out of range")
        if self.joint_parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        # Every joint must reach the root without cycles.
        for start in range(1, j):
            seen = set()
            cur = start
            while cur != 0:
                if cur in seen or cur < 0 or cur >= j:
                    raise ValueError(f"joint parent graph is not a tree rooted at 0 (joint {start})")
                seen.add(cur)
                cur = int(self.joint_parents[cur])
        if self.theta.shape[0] != 3 * j:
            raise ValueError(f"theta must have 3*J = {3 * j} entries, got {self.theta.shape[0]}")
        if self.beta.shape[0] != 10:
            raise ValueError("beta must have 10 entries")


@dataclass
class LbsGrid:
    """Volumetric skinning-weight grid sampled at cell centers."""

    bbox_min: np.ndarray    # (3,)
    bbox_max: np.ndarray    # (3,)
    resolution: tuple[int, int, int]
    weights: np.ndarray     # (nx, ny, nz, J) row-stochastic per cell

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        self.resolution = tuple(int(r) for r in self.resolution)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        nx, ny, nz = self.resolution
        if self.weights.shape[:3] != (nx, ny, nz):
            raise ValueError("grid weights shape does not match resolution")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("grid bbox is empty")
        err = np.abs(self.weights.sum(axis=-1) - 1.0).max()
        if err > 1e-5:
            raise ValueError(f"grid cells must be row-stochastic (max error {err:.2e})")

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution, dtype=np.float64)

    @property
    def n_joints(self) -> int:
        return self.weights.shape[-1]

    def contains_with_margin(self, points: np.ndarray, margin_frac: float = 0.05) -> bool:
        """True when the bbox contains ``points`` with the given relative margin."""
        lo, hi = points.min(axis=0), points.max(axis=0)
        extent = hi - lo
        return bool(np.all(self.bbox_min <= lo - margin_frac * extent)
                    and np.all(self.bbox_max >= hi + margin_frac * extent))


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str


def validate_layer(layer: GaussianLayer) -> list[Violation]:
    """Check per-surfel invariants; returns one Violation per offending field.

    Total function: never raises on bad values.
    """
    out: list[Violation] = []
    qnorm = np.linalg.norm(layer.q, axis=1)
    bad_q = np.abs(qnorm - 1.0) > 1e-6
    bad_s = ~np.all(layer.s > 0, axis=1) | ~np.all(np.isfinite(layer.s), axis=1)
    bad_op = (layer.opacity < 0) | (layer.opacity > 1) | ~np.isfinite(layer.opacity)
    bad_color = ~np.all((layer.color >= 0) & (layer.color <= 1) & np.isfinite(layer.color), axis=1)
    bad_mu = ~np.all(np.isfinite(layer.mu), axis=1)
    for i in np.nonzero(bad_mu)[0]:
        out.append(Violation(int(i), "mu", "position is not finite"))
    for i in np.nonzero(bad_q)[0]:
        out.append(Violation(int(i), "q", f"quaternion norm {qnorm[i]:.6g} != 1"))
    for i in np.nonzero(bad_s)[0]:
        out.append(Violation(int(i), "s", "scales must be positive and finite"))
    for i in np.nonzero(bad_op)[0]:
        out.append(Violation(int(i), "opacity", "opacity outside [0, 1]"))
    for i in np.nonzero(bad_color)[0]:
        out.append(Violation(int(i), "color", "color outside [0, 1]"))
    out.sort(key=lambda v: (v.index, v.field))
    return out


def triangle_frame(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Edge-based orthonormal frame of a triangle: columns (t1, t2, n) with
    t1 along the first edge."""
    e0 = v1 - v0
    n = np.cross(e0, v2 - v0)
    nn = np.linalg.norm(n)
    if nn < 1e-15:
        raise ValueError("degenerate triangle")
    n = n / nn
    t1 = e0 / np.linalg.norm(e0)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=-1)


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted surface sampling.

    Returns (points (n,3), face indices (n,), face frames (n,3,3)).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total surface area")
    fidx = rng.choice(len(faces), size=n, p=areas / total)
    # Uniform barycentric sampling via the sqrt trick.
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    pts = a[:, None] * v0[fidx] + b[:, None] * v1[fidx] + c[:, None] * v2[fidx]

    # Per-face orthonormal frames with the normal in the third column.
    e0 = v1[fidx] - v0[fidx]
    nrm = cross[fidx] / np.linalg.norm(cross[fidx], axis=1, keepdims=True)
    t1 = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    t2 = np.cross(nrm, t1)
    frames = np.stack([t1, t2, nrm], axis=-1)
    return pts, fidx, frames


def sample_layer_from_mesh(template, n: int, label: str = "whole",
                           seed: int = 0, frozen: bool = False,
                           opacity: float = INIT_OPACITY,
                           scale_factor: float = 1.0) -> GaussianLayer:
    """Initialize a layer of surfels on a mesh surface.

    ``template`` is either a SkinnedTemplate or a (vertices, faces) pair.
    Splat normals equal their source face normals; scales start at the mean
    distance to the 3 nearest sampled neighbors; deterministic per seed.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if isinstance(template, SkinnedTemplate):
        vertices, faces = template.vertices, template.faces
    else:
        vertices, faces = template
    rng = np.random.default_rng(seed)
    pts, _, frames = sample_mesh_surface(vertices, faces, n, rng)
    q = rotmat_to_quat(frames)

    if n >= 4:
        tree = cKDTree(pts)
        dist, _ = tree.query(pts, k=4)
        mean_nn = dist[:, 1:].mean(axis=1)
        # Guard against duplicate sample positions on tiny meshes.
        fallback = max(float(np.median(mean_nn)), 1e-6)
        mean_nn = np.where(mean_nn > 1e-12, mean_nn, fallback)
    else:
        diag = np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0))
        mean_nn = np.full(n, max(0.05 * diag, 1e-6))
    s = scale_factor * np.stack([mean_nn, mean_nn], axis=1)

    return GaussianLayer(
        label=label,
        mu=pts,
        q=q,
        s=s,
        opacity=np.full(n, float(opacity)),
        color=np.full((n, 3), INIT_COLOR),
        frozen=frozen,
    )
