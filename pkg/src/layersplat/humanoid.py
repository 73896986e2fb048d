"""Procedural test humanoid: a capsule-and-tube figure with 16 joints,
smooth-blended skinning weights with large rigid interiors, plus a
displaced garment shell over the torso/upper-arm region.

This stands in for real body-template assets in every test and in the
synthetic dataset generator; real templates load through the same
SkinnedTemplate format.
"""
from __future__ import annotations

import numpy as np

from .core import SkinnedTemplate

JOINT_NAMES = [
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]
JOINT_PARENTS = np.array([-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14])

GARMENT_OFFSET = 0.025  # meters the shell floats above the torso surface


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _tube(p0, p1, radii, n_theta, cap0=True, cap1=True, u_hint=None):
    """Swept elliptical tube from p0 to p1.

    radii: (nt, 2) local (u, v) radii sampled along the axis; returns
    (vertices, faces, axis parameter per vertex in [0, 1]).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    if u_hint is None:
        u_hint = np.array([1.0, 0.0, 0.0])
        if abs(axis @ u_hint) > 0.9:
            u_hint = np.array([0.0, 0.0, 1.0])
    u = u_hint - (u_hint @ axis) * axis
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)

    nt = radii.shape[0]
    ts = np.linspace(0.0, 1.0, nt)
    thetas = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    verts = []
    tpar = []
    for i, t in enumerate(ts):
        c = p0 + t * length * axis
        ru, rv = radii[i]
        ring = c + ru * np.cos(thetas)[:, None] * u + rv * np.sin(thetas)[:, None] * v
        verts.append(ring)
        tpar.extend([t] * n_theta)
    verts = np.concatenate(verts)
    faces = []
    for i in range(nt - 1):
        for k in range(n_theta):
            a = i * n_theta + k
            b = i * n_theta + (k + 1) % n_theta
            c = (i + 1) * n_theta + k
            d = (i + 1) * n_theta + (k + 1) % n_theta
            faces.append((a, b, d))
            faces.append((a, d, c))
    if cap0:
        ci = len(verts)
        verts = np.concatenate([verts, p0[None]])
        tpar.append(0.0)
        for k in range(n_theta):
            faces.append((ci, (k + 1) % n_theta, k))
    if cap1:
        ci = len(verts)
        verts = np.concatenate([verts, p1[None]])
        tpar.append(1.0)
        base = (nt - 1) * n_theta
        for k in range(n_theta):
            faces.append((ci, base + k, base + (k + 1) % n_theta))
    return verts, np.array(faces, dtype=np.int64), np.array(tpar)


def _sphere(center, radius, n_theta, n_phi):
    center = np.asarray(center, dtype=np.float64)
    phis = np.linspace(0, np.pi, n_phi)
    thetas = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    verts = []
    for p in phis[1:-1]:
        ring = center + radius * np.stack([
            np.sin(p) * np.cos(thetas), np.cos(p) * np.ones_like(thetas),
            np.sin(p) * np.sin(thetas)], axis=-1)
        verts.append(ring)
    verts = np.concatenate(verts)
    top = len(verts)
    bot = top + 1
    verts = np.concatenate([verts, center + np.array([[0, radius, 0.0]]),
                            center + np.array([[0, -radius, 0.0]])])
    faces = []
    rings = n_phi - 2
    for i in range(rings - 1):
        for k in range(n_theta):
            a = i * n_theta + k
            b = i * n_theta + (k + 1) % n_theta
            c = (i + 1) * n_theta + k
            d = (i + 1) * n_theta + (k + 1) % n_theta
            faces.append((a, d, b))
            faces.append((a, c, d))
    for k in range(n_theta):
        faces.append((top, (k + 1) % n_theta, k))
        base = (rings - 1) * n_theta
        faces.append((bot, base + k, base + (k + 1) % n_theta))
    # flip to outward orientation
    return verts, np.array(faces, dtype=np.int64)[:, ::-1]


# Torso vertical landmarks (canonical, before beta scaling).
TORSO_Y0 = -0.10
TORSO_Y1 = 0.42


def _torso_radius(y, width=1.0):
    """Elliptical torso (rx, rz) profile by height."""
    t = (y - TORSO_Y0) / (TORSO_Y1 - TORSO_Y0)
    rx = 0.16 + 0.03 * np.sin(np.pi * t) - 0.02 * t
    rz = 0.10 + 0.02 * np.sin(np.pi * t)
    return width * rx, width * rz


def make_test_humanoid(beta: np.ndarray | None = None, n_theta: int = 20,
                       detail: int = 12) -> SkinnedTemplate:
    """Build the articulated test figure.

    beta[0] scales overall size, beta[1] torso width, beta[2] limb girth;
    remaining shape coefficients are accepted but unused.
    """
    beta = np.zeros(10) if beta is None else np.asarray(beta, dtype=np.float64).ravel()
    if beta.shape[0] != 10:
        raise ValueError("beta must have 10 entries")
    size = 1.0 + 0.05 * beta[0]
    width = 1.0 + 0.08 * beta[1]
    girth = 1.0 + 0.10 * beta[2]

    J = np.array([
        [0.00, 0.00, 0.0],    # pelvis
        [0.00, 0.15, 0.0],    # spine
        [0.00, 0.32, 0.0],    # chest
        [0.00, 0.52, 0.0],    # head
        [0.18, 0.44, 0.0],    # l_shoulder
        [0.46, 0.44, 0.0],    # l_elbow
        [0.72, 0.44, 0.0],    # l_wrist
        [-0.18, 0.44, 0.0],   # r_shoulder
        [-0.46, 0.44, 0.0],   # r_elbow
        [-0.72, 0.44, 0.0],   # r_wrist
        [0.12, -0.06, 0.0],   # l_hip
        [0.12, -0.48, 0.0],   # l_knee
        [0.12, -0.88, 0.0],   # l_ankle
        [-0.12, -0.06, 0.0],  # r_hip
        [-0.12, -0.48, 0.0],  # r_knee
        [-0.12, -0.88, 0.0],  # r_ankle
    ]) * size

    parts = []  # (verts, faces, weight function verts -> (N, 16))
    nj = 16

    def one_hot(idx, n):
        w = np.zeros((n, nj))
        w[:, idx] = 1.0
        return w

    # Torso tube: pelvis/spine/chest blend by height.
    nt = 2 * detail
    ys = np.linspace(TORSO_Y0 * size, TORSO_Y1 * size, nt)
    radii = np.array([_torso_radius(y / size, width) for y in ys]) * size
    tv, tf, _ = _tube([0, TORSO_Y0 * size, 0], [0, TORSO_Y1 * size, 0], radii,
                      n_theta, cap0=True, cap1=True, u_hint=np.array([1.0, 0, 0]))

    def torso_weights(verts):
        y = verts[:, 1] / size
        x = verts[:, 0] / size
        w = np.zeros((len(verts), nj))
        up1 = _smoothstep((y - 0.02) / 0.18)   # pelvis -> spine
        up2 = _smoothstep((y - 0.20) / 0.18)   # spine -> chest
        w[:, 0] = 1.0 - up1
        w[:, 1] = up1 * (1.0 - up2)
        w[:, 2] = up1 * up2
        # Lateral hip blend toward the torso bottom, matching the upper
        # thighs where the parts interpenetrate.
        down = 0.30 * _smoothstep((-0.02 - y) / 0.09)
        side = _smoothstep((x + 0.07) / 0.14)
        w[:, 10] = w[:, 0] * down * side
        w[:, 13] = w[:, 0] * down * (1.0 - side)
        w[:, 0] *= 1.0 - down
        return w

    parts.append((tv, tf, torso_weights))

    # Neck/head: a short tube plus a sphere, blending chest -> head around
    # the head joint so the field stays continuous with the torso.
    neck_r = np.full((detail, 2), 0.055 * size)
    nv, nf, _ = _tube([0, (TORSO_Y1 - 0.04) * size, 0], J[3] + np.array([0, 0.04 * size, 0]),
                      neck_r, max(12, n_theta // 2), cap0=False, cap1=False)
    hv, hf = _sphere(J[3] + np.array([0, 0.12 * size, 0]), 0.11 * size, n_theta, detail)

    def head_weights(vtx):
        y = vtx[:, 1] / size
        w = np.zeros((len(vtx), nj))
        g = _smoothstep((y - 0.38) / 0.14)     # chest -> head across the neck
        w[:, 2] = 1.0 - g
        w[:, 3] = g
        return w

    parts.append((nv, nf, head_weights))
    parts.append((hv, hf, head_weights))

    def limb(a, b, ra, rb, joint, prev_joint, next_joint,
             start_half, end_half, blend_in=0.32, blend_out=0.32):
        """Capsule from joint a to b driven by ``joint``, with a weight
        field continuous along the chain: segments meeting at a shared
        interior joint both evaluate to a 50/50 split there; terminal ends
        ramp fully to the terminal joint so attached hands/feet match."""
        nt_l = detail
        ts = np.linspace(0, 1, nt_l)
        rr = (ra + (rb - ra) * ts) * girth * size
        radii_l = np.stack([rr, rr], axis=-1)
        lv, lf, tpar = _tube(a, b, radii_l, n_theta, cap0=True, cap1=True)

        def wfun(vtx, tpar=tpar):
            w = np.zeros((len(vtx), nj))
            g_in = _smoothstep(tpar / blend_in)
            g_out = _smoothstep((tpar - (1.0 - blend_out)) / blend_out)
            w_prev = (0.5 if start_half else 1.0) * (1.0 - g_in)
            remaining = 1.0 - w_prev
            w_next = remaining * (0.5 if end_half else 1.0) * g_out
            w[:, prev_joint] = w_prev
            w[:, next_joint] = w_next
            w[:, joint] += remaining - w_next
            return w

        return lv, lf, wfun

    arm_r = 0.055
    fore_r = 0.045
    leg_r = 0.078
    shin_r = 0.055
    # (a, b, r0, r1, driver, prev, next, start_half, end_half, blends)
    segs = [
        (J[4], J[5], arm_r, arm_r * 0.9, 4, 2, 5, False, True, 0.40, 0.40),     # l upper arm
        (J[5], J[6], fore_r, fore_r * 0.85, 5, 4, 6, True, False, 0.40, 0.50),  # l forearm
        (J[7], J[8], arm_r, arm_r * 0.9, 7, 2, 8, False, True, 0.40, 0.40),
        (J[8], J[9], fore_r, fore_r * 0.85, 8, 7, 9, True, False, 0.40, 0.50),
        (J[10], J[11], leg_r, leg_r * 0.8, 10, 0, 11, False, True, 0.45, 0.40),   # l thigh
        (J[11], J[12], shin_r, shin_r * 0.85, 11, 10, 12, True, False, 0.40, 0.50),
        (J[13], J[14], leg_r, leg_r * 0.8, 13, 0, 14, False, True, 0.45, 0.40),
        (J[14], J[15], shin_r, shin_r * 0.85, 14, 13, 15, True, False, 0.40, 0.50),
    ]
    for a, b, ra, rb, jnt, prev, nxt, sh, eh, bi, bo in segs:
        parts.append(limb(a, b, ra, rb, jnt, prev, nxt, sh, eh, blend_in=bi, blend_out=bo))

    # Hands and feet: rigid on the terminal joints, matching the segment
    # ends they attach to.
    for jnt, off, r in ((6, np.array([0.05, 0, 0]), 0.05), (9, np.array([-0.05, 0, 0]), 0.05),
                        (12, np.array([0, -0.05, 0.03]), 0.06), (15, np.array([0, -0.05, 0.03]), 0.06)):
        sv, sf = _sphere(J[jnt] + off * size, r * size, max(10, n_theta // 2), max(6, detail // 2))
        parts.append((sv, sf, lambda vtx, jnt=jnt: one_hot(jnt, len(vtx))))

    verts = []
    faces = []
    weights = []
    base = 0
    for pv, pf, wfun in parts:
        verts.append(pv)
        faces.append(pf + base)
        weights.append(wfun(pv))
        base += len(pv)
    vertices = np.concatenate(verts)
    all_faces = np.concatenate(faces)
    w = np.concatenate(weights)
    w /= w.sum(axis=1, keepdims=True)

    return SkinnedTemplate(vertices=vertices, faces=all_faces, joint_positions=J,
                           joint_parents=JOINT_PARENTS, weights=w, beta=beta)


def make_garment_shell(template: SkinnedTemplate, coverage: float = 0.5,
                       offset: float = GARMENT_OFFSET, n_theta: int = 32,
                       n_h: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Displaced open tube floating ``offset`` above the torso surface.

    coverage in [0, 1] stretches the hem from chest-only down to the hip
    line and widens the sleeve stubs. Returns (vertices, faces).
    """
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("garment coverage must lie in [0, 1]")
    size = 1.0 + 0.05 * template.beta[0]
    width = 1.0 + 0.08 * template.beta[1]
    y_top = 0.40 * size
    y_bot = (0.18 - coverage * 0.30) * size
    ys = np.linspace(y_bot, y_top, n_h)
    radii = []
    for y in ys:
        rx, rz = _torso_radius(y / size, width)
        radii.append((rx * size + offset, rz * size + offset))
    radii = np.array(radii)
    verts, faces, _ = _tube([0, y_bot, 0], [0, y_top, 0], radii, n_theta,
                            cap0=False, cap1=False, u_hint=np.array([1.0, 0, 0]))
    return verts, faces
