"""Quaternion and rotation helpers shared across the package.

Convention: quaternions are (w, x, y, z), and rotation matrices map the
splat-local frame to world space, i.e. columns are the world-space images of
the local x/y/z axes.
"""
from __future__ import annotations

import numpy as np


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Works on (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert (..., 4) unit quaternions (w,x,y,z) to (..., 3, 3) rotations.

    Inputs are normalized internally, so callers may pass raw optimizer
    values.
    """
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert (..., 3, 3) rotation matrices to unit quaternions (w,x,y,z).

    Uses the numerically stable branch selection on the matrix trace.
    """
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    if single:
        R = R[None]
    m00, m01, m02 = R[:, 0, 0], R[:, 0, 1], R[:, 0, 2]
    m10, m11, m12 = R[:, 1, 0], R[:, 1, 1], R[:, 1, 2]
    m20, m21, m22 = R[:, 2, 0], R[:, 2, 1], R[:, 2, 2]
    q = np.empty((R.shape[0], 4), dtype=np.float64)

    trace = m00 + m11 + m22
    # Branch per element; vectorized via masks.
    c0 = trace > 0
    c1 = (~c0) & (m00 >= m11) & (m00 >= m22)
    c2 = (~c0) & (~c1) & (m11 >= m22)
    c3 = ~(c0 | c1 | c2)

    t = np.sqrt(np.maximum(1.0 + trace, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        q[c0, 0] = 0.5 * t[c0]
        q[c0, 1] = (m21 - m12)[c0] / (2.0 * t[c0])
        q[c0, 2] = (m02 - m20)[c0] / (2.0 * t[c0])
        q[c0, 3] = (m10 - m01)[c0] / (2.0 * t[c0])

        t1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0))
        q[c1, 1] = 0.5 * t1[c1]
        q[c1, 0] = (m21 - m12)[c1] / (2.0 * t1[c1])
        q[c1, 2] = (m01 + m10)[c1] / (2.0 * t1[c1])
        q[c1, 3] = (m02 + m20)[c1] / (2.0 * t1[c1])

        t2 = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0))
        q[c2, 2] = 0.5 * t2[c2]
        q[c2, 0] = (m02 - m20)[c2] / (2.0 * t2[c2])
        q[c2, 1] = (m01 + m10)[c2] / (2.0 * t2[c2])
        q[c2, 3] = (m12 + m21)[c2] / (2.0 * t2[c2])

        t3 = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0))
        q[c3, 3] = 0.5 * t3[c3]
        q[c3, 0] = (m10 - m01)[c3] / (2.0 * t3[c3])
        q[c3, 1] = (m02 + m20)[c3] / (2.0 * t3[c3])
        q[c3, 2] = (m12 + m21)[c3] / (2.0 * t3[c3])

    q = normalize_quat(q)
    # Canonical sign: w >= 0.
    flip = q[:, 0] < 0
    q[flip] *= -1.0
    return q[0] if single else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (..., 4) quaternion arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast(a, b).shape[:-1] + (4,), dtype=np.float64)
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def axis_angle_to_rotmat(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (..., 3) axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    if single:
        aa = aa[None]
    angle = np.linalg.norm(aa, axis=-1)
    R = np.tile(np.eye(3), (aa.shape[0], 1, 1))
    nz = angle > 1e-12
    if np.any(nz):
        axis = aa[nz] / angle[nz, None]
        x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
        c = np.cos(angle[nz])
        s = np.sin(angle[nz])
        C = 1.0 - c
        R[nz] = np.stack(
            [
                np.stack([c + x * x * C, x * y * C - z * s, x * z * C + y * s], axis=-1),
                np.stack([y * x * C + z * s, c + y * y * C, y * z * C - x * s], axis=-1),
                np.stack([z * x * C - y * s, z * y * C + x * s, c + z * z * C], axis=-1),
            ],
            axis=-2,
        )
    return R[0] if single else R


def rotate_vectors(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate (..., 3) vectors by (..., 4) quaternions."""
    R = quat_to_rotmat(q)
    return np.einsum("...ij,...j->...i", R, v)
