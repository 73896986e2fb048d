"""Mesh geometry workhorses: exact nearest point-on-mesh queries with a
KD-tree candidate prefilter, a z-buffered face-ID rasterizer, and
generalized winding numbers.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .core import Camera


@njit(cache=True, inline="always")
def _closest_point_tri(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle ABC to P (Ericson, Real-Time Collision
    Detection). Returns (qx, qy, qz, u, v, w) with barycentrics u,v,w."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz, 1.0 - t, t, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz, 1.0 - t, 0.0, t
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz),
                0.0, 1.0 - t, t)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w,
            1.0 - v - w, v, w)


@njit(cache=True, parallel=True)
def _nearest_kernel(points, v0, v1, v2, cand, cand_offsets,
                    out_dist, out_tri, out_point, out_bary):
    for i in prange(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        best_tri = -1
        bqx = bqy = bqz = 0.0
        bu = bv = bw = 0.0
        for j in range(cand_offsets[i], cand_offsets[i + 1]):
            f = cand[j]
            qx, qy, qz, u, v, w = _closest_point_tri(
                px, py, pz,
                v0[f, 0], v0[f, 1], v0[f, 2],
                v1[f, 0], v1[f, 1], v1[f, 2],
                v2[f, 0], v2[f, 1], v2[f, 2])
            d = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d < best:
                best = d
                best_tri = f
                bqx, bqy, bqz = qx, qy, qz
                bu, bv, bw = u, v, w
        out_dist[i] = np.sqrt(best)
        out_tri[i] = best_tri
        out_point[i, 0] = bqx
        out_point[i, 1] = bqy
        out_point[i, 2] = bqz
        out_bary[i, 0] = bu
        out_bary[i, 1] = bv
        out_bary[i, 2] = bw


class MeshDistanceIndex:
    """Exact nearest-triangle queries accelerated by a centroid KD-tree.

    The candidate set per query is every triangle whose centroid lies within
    the proven upper bound plus the largest centroid-to-vertex radius, so
    results equal the brute-force scan.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        self.v0 = np.ascontiguousarray(self.vertices[self.faces[:, 0]])
        self.v1 = np.ascontiguousarray(self.vertices[self.faces[:, 1]])
        self.v2 = np.ascontiguousarray(self.vertices[self.faces[:, 2]])
        self.centroids = (self.v0 + self.v1 + self.v2) / 3.0
        self.max_radius = float(np.sqrt(max(
            ((self.v0 - self.centroids) ** 2).sum(1).max(),
            ((self.v1 - self.centroids) ** 2).sum(1).max(),
            ((self.v2 - self.centroids) ** 2).sum(1).max())))
        self.tree = cKDTree(self.centroids)

    def query(self, points: np.ndarray):
        """Returns (distance, triangle index, closest point, barycentric)."""
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        n = points.shape[0]
        # Upper bound: exact distance to the triangle under the nearest centroid.
        _, seed_tri = self.tree.query(points)
        seed_cand = seed_tri.astype(np.int64)
        off = np.arange(n + 1, dtype=np.int64)
        d_ub = np.empty(n)
        tri0 = np.empty(n, dtype=np.int64)
        pt0 = np.empty((n, 3))
        ba0 = np.empty((n, 3))
        _nearest_kernel(points, self.v0, self.v1, self.v2, seed_cand, off,
                        d_ub, tri0, pt0, ba0)
        radii = d_ub + self.max_radius + 1e-12
        cand_lists = self.tree.query_ball_point(points, radii)
        lengths = np.array([len(c) for c in cand_lists], dtype=np.int64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        cand = np.empty(int(offsets[-1]), dtype=np.int64)
        for i, c in enumerate(cand_lists):
            cand[offsets[i]:offsets[i + 1]] = c
        dist = np.empty(n)
        tri = np.empty(n, dtype=np.int64)
        pt = np.empty((n, 3))
        bary = np.empty((n, 3))
        _nearest_kernel(points, self.v0, self.v1, self.v2, cand, offsets,
                        dist, tri, pt, bary)
        return dist, tri, pt, bary


def nearest_on_mesh_bruteforce(points: np.ndarray, vertices: np.ndarray,
                               faces: np.ndarray):
    """O(N*M) oracle for MeshDistanceIndex."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v0 = np.ascontiguousarray(vertices[faces[:, 0]], dtype=np.float64)
    v1 = np.ascontiguousarray(vertices[faces[:, 1]], dtype=np.float64)
    v2 = np.ascontiguousarray(vertices[faces[:, 2]], dtype=np.float64)
    n = points.shape[0]
    m = len(faces)
    cand = np.tile(np.arange(m, dtype=np.int64), n)
    offsets = np.arange(n + 1, dtype=np.int64) * m
    dist = np.empty(n)
    tri = np.empty(n, dtype=np.int64)
    pt = np.empty((n, 3))
    bary = np.empty((n, 3))
    _nearest_kernel(points, v0, v1, v2, cand, offsets, dist, tri, pt, bary)
    return dist, tri, pt, bary


@njit(cache=True)
def _raster_face_ids(pix, z, faces, H, W, face_id, zbuf):
    """Z-buffered rasterization of projected triangles; writes face indices.
    pix: (Nv, 2) pixel coords, z: (Nv,) camera depth (must be > 0 to draw)."""
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[i0] <= 0 or z[i1] <= 0 or z[i2] <= 0:
            continue
        x0, y0 = pix[i0, 0], pix[i0, 1]
        x1, y1 = pix[i1, 0], pix[i1, 1]
        x2, y2 = pix[i2, 0], pix[i2, 1]
        xmin = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)))), W - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)))), H - 1)
        if xmin > xmax or ymin > ymax:
            continue
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if np.abs(det) < 1e-12:
            continue
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                cxp = px + 0.5
                cyp = py + 0.5
                w1 = ((cxp - x0) * (y2 - y0) - (x2 - x0) * (cyp - y0)) / det
                w2 = ((x1 - x0) * (cyp - y0) - (cxp - x0) * (y1 - y0)) / det
                w0 = 1.0 - w1 - w2
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                zi = w0 * z[i0] + w1 * z[i1] + w2 * z[i2]
                if zi < zbuf[py, px]:
                    zbuf[py, px] = zi
                    face_id[py, px] = f


def rasterize_face_ids(vertices: np.ndarray, faces: np.ndarray,
                       camera: Camera) -> np.ndarray:
    """(H, W) array of nearest face indices, -1 where no face covers."""
    pix, z = camera.project(np.asarray(vertices, dtype=np.float64))
    H, W = camera.height, camera.width
    face_id = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    _raster_face_ids(np.ascontiguousarray(pix), np.ascontiguousarray(z),
                     np.ascontiguousarray(faces, dtype=np.int64), H, W, face_id, zbuf)
    return face_id


@njit(cache=True, parallel=True)
def tsdf_integrate_view(tsdf, weight, lo, voxel, nx, ny, nz,
                        R, t, fx, fy, cx, cy, W, H,
                        depth, alpha, trunc, alpha_min):
    """Weighted-average TSDF update of one rendered view; parallel over x
    slabs (disjoint writes)."""
    for i in prange(nx):
        x = lo[0] + (i + 0.5) * voxel
        for j in range(ny):
            y = lo[1] + (j + 0.5) * voxel
            base = (i * ny + j) * nz
            for k in range(nz):
                z3 = lo[2] + (k + 0.5) * voxel
                zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z3 + t[2]
                if zc <= 0.0:
                    continue
                xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z3 + t[0]
                yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z3 + t[1]
                px = int(np.floor(fx * xc / zc + cx))
                py = int(np.floor(fy * yc / zc + cy))
                if px < 0 or px >= W or py < 0 or py >= H:
                    continue
                if alpha[py, px] < alpha_min:
                    continue
                sdf = depth[py, px] - zc
                if sdf < -trunc:
                    continue
                v = sdf / trunc
                if v > 1.0:
                    v = 1.0
                idx = base + k
                w = weight[idx]
                tsdf[idx] = (tsdf[idx] * w + v) / (w + 1.0)
                weight[idx] = w + 1.0


@njit(cache=True, parallel=True)
def _winding_kernel(points, v0, v1, v2, lo, hi, out):
    four_pi = 4.0 * np.pi
    for i in prange(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        if (px < lo[0] or px > hi[0] or py < lo[1] or py > hi[1]
                or pz < lo[2] or pz > hi[2]):
            out[i] = 0.0
            continue
        total = 0.0
        for f in range(v0.shape[0]):
            axp = v0[f, 0] - px
            ayp = v0[f, 1] - py
            azp = v0[f, 2] - pz
            bxp = v1[f, 0] - px
            byp = v1[f, 1] - py
            bzp = v1[f, 2] - pz
            cxp = v2[f, 0] - px
            cyp = v2[f, 1] - py
            czp = v2[f, 2] - pz
            la = np.sqrt(axp * axp + ayp * ayp + azp * azp)
            lb = np.sqrt(bxp * bxp + byp * byp + bzp * bzp)
            lc = np.sqrt(cxp * cxp + cyp * cyp + czp * czp)
            det = (axp * (byp * czp - bzp * cyp)
                   - ayp * (bxp * czp - bzp * cxp)
                   + azp * (bxp * cyp - byp * cxp))
            ab = axp * bxp + ayp * byp + azp * bzp
            bc = bxp * cxp + byp * cyp + bzp * czp
            ca = cxp * axp + cyp * ayp + czp * azp
            denom = la * lb * lc + ab * lc + bc * la + ca * lb
            total += 2.0 * np.arctan2(det, denom)
        out[i] = total / four_pi


def winding_numbers(points: np.ndarray, vertices: np.ndarray,
                    faces: np.ndarray, bbox_margin: float = 0.05) -> np.ndarray:
    """Generalized winding numbers of ``points`` with respect to the mesh.
    Points outside the (padded) mesh bbox short-circuit to 0."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    pad = bbox_margin * (hi - lo).max()
    out = np.empty(points.shape[0])
    _winding_kernel(points,
                    np.ascontiguousarray(vertices[faces[:, 0]]),
                    np.ascontiguousarray(vertices[faces[:, 1]]),
                    np.ascontiguousarray(vertices[faces[:, 2]]),
                    lo - pad, hi + pad, out)
    return out
