"""Skeletal deformation: baked volumetric LBS weight grids, forward
kinematics, posing/unposing of surfel layers, and frozen dummy layers.

Posing treats the blended transform as constant with respect to the surfel
position when transporting gradients (weights are looked up once per step),
which is the standard linearization for grid-interpolated skinning.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from .core import GaussianLayer, LbsGrid, SkinnedTemplate, sample_layer_from_mesh
from .quaternions import axis_angle_to_rotmat, quat_multiply, rotmat_to_quat

DUMMY_OPACITY = 0.95


@dataclass
class BoneTransforms:
    """Per-joint rigid transforms mapping canonical bone frames to posed
    frames (the classic skinning matrices)."""

    matrices: np.ndarray  # (J, 4, 4)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64).reshape(-1, 4, 4)
        for j, M in enumerate(self.matrices):
            R = M[:3, :3]
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
                raise ValueError(f"bone transform {j} is not rigid")
            if np.abs(M[3] - np.array([0, 0, 0, 1.0])).max() > 1e-9:
                raise ValueError(f"bone transform {j} has a non-affine last row")

    @property
    def n_joints(self) -> int:
        return self.matrices.shape[0]

    @staticmethod
    def from_pose(template: SkinnedTemplate, theta: Optional[np.ndarray] = None) -> "BoneTransforms":
        """Forward kinematics: compose per-joint axis-angle rotations down
        the skeleton tree and cancel the rest pose."""
        theta = template.theta if theta is None else np.asarray(theta, dtype=np.float64).ravel()
        j = template.n_joints
        if theta.shape[0] != 3 * j:
            raise ValueError(f"pose vector must have {3 * j} entries")
        rots = axis_angle_to_rotmat(theta.reshape(j, 3))
        world = np.zeros((j, 4, 4))
        for i in range(j):
            parent = int(template.joint_parents[i])
            local = np.eye(4)
            local[:3, :3] = rots[i]
            if parent < 0:
                local[:3, 3] = template.joint_positions[i]
                world[i] = local
            else:
                local[:3, 3] = template.joint_positions[i] - template.joint_positions[parent]
                world[i] = world[parent] @ local
        out = np.zeros((j, 4, 4))
        for i in range(j):
            rest_inv = np.eye(4)
            rest_inv[:3, 3] = -template.joint_positions[i]
            out[i] = world[i] @ rest_inv
        return BoneTransforms(out)

    @staticmethod
    def identity(n_joints: int) -> "BoneTransforms":
        return BoneTransforms(np.tile(np.eye(4), (n_joints, 1, 1)))

    def inverted(self) -> "BoneTransforms":
        return BoneTransforms(np.linalg.inv(self.matrices))


def bake_lbs_grid(template: SkinnedTemplate, resolution=(64, 64, 64),
                  margin_frac: float = 0.08) -> LbsGrid:
    """Nearest-vertex weights at cell centers, diffused by one 3^3 smoothing
    pass and renormalized."""
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 8:
        raise ValueError("grid resolution must be at least 8 per axis")
    lo = template.vertices.min(axis=0)
    hi = template.vertices.max(axis=0)
    extent = hi - lo
    bbox_min = lo - margin_frac * extent
    bbox_max = hi + margin_frac * extent

    nx, ny, nz = resolution
    cell = (bbox_max - bbox_min) / np.array(resolution, dtype=np.float64)
    cx = bbox_min[0] + (np.arange(nx) + 0.5) * cell[0]
    cy = bbox_min[1] + (np.arange(ny) + 0.5) * cell[1]
    cz = bbox_min[2] + (np.arange(nz) + 0.5) * cell[2]
    gx, gy, gz = np.meshgrid(cx, cy, cz, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    tree = cKDTree(template.vertices)
    _, nearest = tree.query(centers)
    weights = template.weights[nearest].reshape(nx, ny, nz, -1)

    smoothed = np.empty_like(weights)
    for jj in range(weights.shape[-1]):
        smoothed[..., jj] = uniform_filter(weights[..., jj], size=3, mode="nearest")
    smoothed /= smoothed.sum(axis=-1, keepdims=True)

    grid = LbsGrid(bbox_min=bbox_min, bbox_max=bbox_max, resolution=resolution,
                   weights=smoothed)
    assert grid.contains_with_margin(template.vertices, 0.05)
    return grid


def query_weights(grid: LbsGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the 8 surrounding cell centers,
    renormalized to sum 1. Points outside the bbox clamp to the boundary."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    res = np.asarray(grid.resolution)
    g = (pts - grid.bbox_min) / grid.cell_size - 0.5
    g = np.clip(g, 0.0, res - 1.0)
    i0 = np.floor(g).astype(np.int64)
    i0 = np.minimum(i0, res - 2)
    i0 = np.maximum(i0, 0)
    f = g - i0
    w = np.zeros((pts.shape[0], grid.n_joints))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                coef = (np.abs(1 - dx - f[:, 0]) * np.abs(1 - dy - f[:, 1])
                        * np.abs(1 - dz - f[:, 2]))
                w += coef[:, None] * grid.weights[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def blend_transforms(weights: np.ndarray, bones: BoneTransforms) -> np.ndarray:
    """(N, J) weights x (J, 4, 4) bones -> (N, 3, 4) affine blends."""
    return np.einsum("nj,jab->nab", weights, bones.matrices[:, :3, :])


def _polar_rotations(L: np.ndarray) -> np.ndarray:
    """Rotation factors of (N, 3, 3) linear parts via SVD, det-corrected."""
    U, _, Vt = np.linalg.svd(L)
    R = U @ Vt
    det = np.linalg.det(R)
    neg = det < 0
    if np.any(neg):
        U = U.copy()
        U[neg, :, 2] *= -1.0
        R = U @ Vt
    return R


@dataclass
class PoseInfo:
    """What pose_backward needs: the blended linear parts and the rotations
    applied to the orientations."""

    linear: np.ndarray   # (N, 3, 3)
    rot_quat: np.ndarray  # (N, 4)


def pose_gaussians(layer: GaussianLayer, grid: LbsGrid, bones: BoneTransforms,
                   weight_points: Optional[np.ndarray] = None,
                   return_info: bool = False):
    """Deform a canonical layer by blended bone transforms.

    mu' = T mu; q' = polar(T_linear) * q; scales, opacity and color are
    untouched (splat areas are pose-invariant). ``weight_points`` overrides
    where skinning weights are sampled (used for exact unposing).
    """
    wp = layer.mu if weight_points is None else np.asarray(weight_points, dtype=np.float64)
    w = query_weights(grid, wp)
    T = blend_transforms(w, bones)
    L = T[:, :, :3]
    det = np.linalg.det(L)
    if np.any(det <= 0):
        bad = int(np.argmax(det <= 0))
        raise ValueError(f"degenerate skinning blend at surfel {bad} (det {det[bad]:.3g})")
    mu = np.einsum("nab,nb->na", L, layer.mu) + T[:, :, 3]
    R_pol = _polar_rotations(L)
    q_pol = rotmat_to_quat(R_pol)
    q = quat_multiply(q_pol, layer.q)
    posed = GaussianLayer(label=layer.label, mu=mu, q=q, s=layer.s.copy(),
                          opacity=layer.opacity.copy(), color=layer.color.copy(),
                          frozen=layer.frozen)
    if return_info:
        return posed, PoseInfo(linear=L, rot_quat=q_pol)
    return posed


def _quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """(N, 4, 4) matrices Q with quat_multiply(p, q) == Q @ q."""
    w, x, y, z = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    Q = np.empty((p.shape[0], 4, 4))
    Q[:, 0] = np.stack([w, -x, -y, -z], axis=-1)
    Q[:, 1] = np.stack([x, w, -z, y], axis=-1)
    Q[:, 2] = np.stack([y, z, w, -x], axis=-1)
    Q[:, 3] = np.stack([z, -y, x, w], axis=-1)
    return Q


def pose_backward(grads, info: PoseInfo):
    """Map gradients computed on a posed layer back to canonical
    parameters (in place on a LayerGrads-compatible object)."""
    grads.mu[:] = np.einsum("nba,nb->na", info.linear, grads.mu)
    Q = _quat_left_matrix(info.rot_quat)
    grads.q[:] = np.einsum("nba,nb->na", Q, grads.q)
    return grads


def build_dummy_layer(source, n: int, seed: int = 0) -> GaussianLayer:
    """Frozen guidance layer sampled on a template or coarse mesh; excluded
    from RGB losses, participates in depth supervision only. Scales are
    inflated so the dummy surface composites densely."""
    if isinstance(source, SkinnedTemplate):
        mesh = (source.vertices, source.faces)
    else:
        mesh = source
    return sample_layer_from_mesh(mesh, n, label="dummy", seed=seed, frozen=True,
                                  opacity=DUMMY_OPACITY, scale_factor=1.5)
