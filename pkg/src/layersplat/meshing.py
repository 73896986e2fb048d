"""Surface extraction and mesh-driven recomposition: TSDF fusion of rendered
depth maps, marching cubes, label voting, surfel-to-mesh attachment, LBS
re-posing, Laplacian penetration resolution, and virtual try-on.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree
from skimage import measure

from .core import Camera, GaussianLayer, LbsGrid, SkinnedTemplate, triangle_frame
from .geometry3d import (MeshDistanceIndex, rasterize_face_ids,
                         tsdf_integrate_view, winding_numbers)
from .quaternions import quat_multiply, quat_to_rotmat, rotmat_to_quat
from .rasterizer import render
from .skinning import BoneTransforms, blend_transforms, query_weights

DEPTH_ALPHA_MIN = 0.5          # depth pixels below this opacity are not fused
LABEL_ISLAND_MIN_FACES = 20
DEFAULT_CLEARANCE = 0.005
# Quadratic energy coefficients of the soft-constraint solve. The
# smoothness term's own coefficient keeps edits local while letting the
# vertex constraints dominate.
PENETRATION_WEIGHT = 10.0
REGULARIZATION_WEIGHT = 0.1
LAPLACIAN_WEIGHT = 0.1
MAX_RESOLVE_ROUNDS = 3


class PenetrationError(RuntimeError):
    def __init__(self, count: int):
        super().__init__(f"{count} vertices still penetrate after "
                         f"{MAX_RESOLVE_ROUNDS} resolve rounds")
        self.count = count


@dataclass
class TsdfVolume:
    bbox_min: np.ndarray
    voxel_size: float
    truncation: float
    tsdf: np.ndarray      # (nx, ny, nz) in [-1, 1]; negative inside
    weight: np.ndarray    # (nx, ny, nz) >= 0

    def __post_init__(self):
        if self.truncation < 2.0 * self.voxel_size:
            raise ValueError("truncation must be at least twice the voxel size")

    @property
    def resolution(self):
        return self.tsdf.shape

    def cell_centers_world(self, idx: np.ndarray) -> np.ndarray:
        return self.bbox_min + (idx + 0.5) * self.voxel_size


def tsdf_fuse(layers: Sequence[GaussianLayer], cameras: Sequence[Camera],
              voxel_size: float = 0.01, truncation: Optional[float] = None,
              bbox_pad: Optional[float] = None) -> TsdfVolume:
    """Render depth from every camera and integrate the standard weighted-
    average TSDF update; pixels with alpha below DEPTH_ALPHA_MIN are
    skipped."""
    layers = list(layers)
    truncation = 4.0 * voxel_size if truncation is None else truncation
    mu = np.concatenate([l.mu for l in layers])
    smax = np.concatenate([l.s.max(axis=1) for l in layers])
    pad = truncation + 2 * voxel_size if bbox_pad is None else bbox_pad
    lo = (mu - 3 * smax[:, None]).min(axis=0) - pad
    hi = (mu + 3 * smax[:, None]).max(axis=0) + pad
    if np.any(hi <= lo):
        raise ValueError("empty TSDF bounding box")
    res = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
    nx, ny, nz = (int(r) for r in res)
    if nx * ny * nz > 200_000_000:
        raise ValueError(
            f"TSDF grid {nx}x{ny}x{nz} is unreasonably large; increase voxel_size")

    tsdf = np.zeros(nx * ny * nz)
    weight = np.zeros(nx * ny * nz)
    for cam in cameras:
        out, _ = render(layers, cam, keep_records=False)
        tsdf_integrate_view(tsdf, weight, lo, voxel_size, nx, ny, nz,
                            cam.rotation, cam.translation,
                            cam.fx, cam.fy, cam.cx, cam.cy,
                            cam.width, cam.height,
                            out.depth, out.alpha, truncation, DEPTH_ALPHA_MIN)

    return TsdfVolume(bbox_min=lo, voxel_size=voxel_size, truncation=truncation,
                      tsdf=tsdf.reshape(nx, ny, nz), weight=weight.reshape(nx, ny, nz))


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def ensure_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip winding if face normals point inward (negative signed volume)."""
    if _signed_volume(vertices, faces) < 0:
        faces = faces[:, ::-1].copy()
    return faces


def _fill_unobserved(vol: TsdfVolume) -> np.ndarray:
    """Classify unobserved voxels as exterior (+1) or enclosed interior
    (-1) by flood-filling free space from the volume boundary, so the zero
    level set only appears where observations put it."""
    from scipy.ndimage import binary_propagation

    observed = vol.weight > 0
    field = vol.tsdf.copy()
    candidates = (~observed) | (observed & (vol.tsdf > 0.0))
    seed = np.zeros_like(candidates)
    seed[0, :, :] = seed[-1, :, :] = True
    seed[:, 0, :] = seed[:, -1, :] = True
    seed[:, :, 0] = seed[:, :, -1] = True
    seed &= candidates
    exterior = binary_propagation(seed, mask=candidates)
    field[~observed & exterior] = 1.0
    field[~observed & ~exterior] = -1.0
    return field


def marching_cubes(vol: TsdfVolume) -> tuple[np.ndarray, np.ndarray]:
    """Zero level set of the fused volume as a triangle mesh (world
    coordinates, outward orientation)."""
    observed = vol.weight > 0
    vals = vol.tsdf[observed]
    if vals.size == 0 or vals.min() >= 0.0 or vals.max() <= 0.0:
        raise ValueError("volume does not cross zero; nothing to extract")
    field = _fill_unobserved(vol)
    verts, faces, _, _ = measure.marching_cubes(field, level=0.0)
    verts = vol.bbox_min + (verts + 0.5) * vol.voxel_size
    faces = ensure_outward(verts, faces.astype(np.int64))
    return verts, faces


@dataclass
class LabeledMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray  # (M,) 0 = body, 1 = garment

    def submesh(self, label: int) -> tuple[np.ndarray, np.ndarray]:
        keep = np.nonzero(self.face_labels == label)[0]
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(self.vertices.shape[0], -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return self.vertices[used].copy(), remap[faces]


BODY_LABEL = 0
GARMENT_LABEL = 1


def _face_adjacency(faces: np.ndarray) -> list:
    edges = np.sort(np.stack([
        faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1).reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(faces)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    adj = [[] for _ in range(len(faces))]
    i = 0
    while i < len(edges):
        j = i + 1
        while j < len(edges) and edges[j, 0] == edges[i, 0] and edges[j, 1] == edges[i, 1]:
            j += 1
        group = owner[i:j]
        for a in group:
            for b in group:
                if a != b:
                    adj[a].append(int(b))
        i = j
    return adj


def label_mesh_by_votes(vertices: np.ndarray, faces: np.ndarray,
                        cameras: Sequence[Camera],
                        label_images: Sequence[np.ndarray]) -> LabeledMesh:
    """Vote per-view pixel labels onto visible faces (z-buffered), fill
    unseen faces from labeled neighbors, and clean small label islands.

    label_images: per view (H, W) ints, 0 = background, 1 = body,
    2 = garment.
    """
    m = len(faces)
    votes = np.zeros((m, 2), dtype=np.int64)
    for cam, labels in zip(cameras, label_images):
        fid = rasterize_face_ids(vertices, faces, cam)
        vis = fid >= 0
        f = fid[vis]
        lab = np.asarray(labels)[vis]
        votes[:, 0] += np.bincount(f[lab == 1], minlength=m)
        votes[:, 1] += np.bincount(f[lab == 2], minlength=m)
    seen = votes.sum(axis=1) > 0
    if not seen.any():
        raise ValueError("no face received any label vote")
    # Majority vote; ties go to body (mislabeled garment would leak body
    # texture into the extracted garment).
    face_labels = np.full(m, -1, dtype=np.int64)
    face_labels[seen] = np.where(votes[seen, 1] > votes[seen, 0], GARMENT_LABEL, BODY_LABEL)

    adj = _face_adjacency(faces)
    # Multi-source BFS from voted faces across shared edges.
    queue = deque(np.nonzero(seen)[0].tolist())
    while queue:
        f = queue.popleft()
        for nb in adj[f]:
            if face_labels[nb] < 0:
                face_labels[nb] = face_labels[f]
                queue.append(nb)
    # Disconnected unseen components: nearest labeled centroid.
    if np.any(face_labels < 0):
        centroids = vertices[faces].mean(axis=1)
        labeled = face_labels >= 0
        tree = cKDTree(centroids[labeled])
        _, nn = tree.query(centroids[~labeled])
        face_labels[~labeled] = face_labels[labeled][nn]

    # Remove small same-label islands.
    comp = np.full(m, -1, dtype=np.int64)
    n_comp = 0
    for f in range(m):
        if comp[f] >= 0:
            continue
        stack = [f]
        comp[f] = n_comp
        members = [f]
        while stack:
            cur = stack.pop()
            for nb in adj[cur]:
                if comp[nb] < 0 and face_labels[nb] == face_labels[f]:
                    comp[nb] = n_comp
                    stack.append(nb)
                    members.append(nb)
        if len(members) < LABEL_ISLAND_MIN_FACES:
            neighbor_labels = [face_labels[nb] for mbr in members for nb in adj[mbr]
                               if comp[nb] != n_comp]
            if neighbor_labels:
                flip = np.bincount(neighbor_labels, minlength=2).argmax()
                for mbr in members:
                    face_labels[mbr] = flip
        n_comp += 1

    return LabeledMesh(vertices=np.asarray(vertices, dtype=np.float64),
                       faces=np.asarray(faces, dtype=np.int64),
                       face_labels=face_labels)


def extract_garment_gaussians(layer: GaussianLayer, garment_vertices: np.ndarray,
                              garment_faces: np.ndarray, threshold: float = 0.015
                              ) -> tuple[GaussianLayer, GaussianLayer]:
    """Exact partition of a layer by point-to-mesh distance: surfels whose
    center lies within ``threshold`` of the garment mesh, and the rest."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    index = MeshDistanceIndex(garment_vertices, garment_faces)
    dist, _, _, _ = index.query(layer.mu)
    near = dist <= threshold

    def take(mask, label):
        return GaussianLayer(label=label, mu=layer.mu[mask].copy(), q=layer.q[mask].copy(),
                             s=layer.s[mask].copy(), opacity=layer.opacity[mask].copy(),
                             color=layer.color[mask].copy())

    return take(near, "garment"), take(~near, layer.label)


@dataclass
class Bindings:
    """Surfel-to-triangle attachment: barycentric anchor of the closest
    point, the local offset in the triangle frame (third component is the
    signed normal offset), and the relative orientation."""

    tri: np.ndarray          # (N,) triangle indices
    bary: np.ndarray         # (N, 3) barycentric, >= 0, sums to 1
    local_offset: np.ndarray  # (N, 3) in the triangle frame
    rel_quat: np.ndarray     # (N, 4) triangle frame -> surfel orientation
    n_faces: int
    n_vertices: int


def _triangle_frames(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    e0 = v1 - v0
    n = np.cross(e0, v2 - v0)
    nl = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(nl < 1e-15):
        raise ValueError("mesh contains degenerate triangles")
    n = n / nl
    t1 = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=-1)  # (M, 3, 3) columns


def attach_gaussians(layer: GaussianLayer, vertices: np.ndarray,
                     faces: np.ndarray) -> Bindings:
    """Bind every surfel to its nearest triangle (exact nearest via the
    KD-prefiltered index)."""
    index = MeshDistanceIndex(vertices, faces)
    _, tri, closest, bary = index.query(layer.mu)
    frames = _triangle_frames(np.asarray(vertices, dtype=np.float64),
                              np.asarray(faces, dtype=np.int64))[tri]
    local = np.einsum("nij,nj->ni", frames.transpose(0, 2, 1), layer.mu - closest)
    frame_quat = rotmat_to_quat(frames)
    # relative rotation: frame^-1 * orientation
    conj = frame_quat * np.array([1.0, -1.0, -1.0, -1.0])
    rel = quat_multiply(conj, layer.q)
    return Bindings(tri=tri, bary=bary, local_offset=local, rel_quat=rel,
                    n_faces=len(faces), n_vertices=len(vertices))


def transform_attached(layer: GaussianLayer, bindings: Bindings,
                       vertices: np.ndarray, faces: np.ndarray) -> GaussianLayer:
    """Carry bound surfels onto a deformed mesh with identical topology."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) != bindings.n_faces or len(vertices) != bindings.n_vertices:
        raise ValueError("deformed mesh topology does not match the bindings")
    tf = faces[bindings.tri]
    anchor = (bindings.bary[:, 0, None] * vertices[tf[:, 0]]
              + bindings.bary[:, 1, None] * vertices[tf[:, 1]]
              + bindings.bary[:, 2, None] * vertices[tf[:, 2]])
    frames = _triangle_frames(vertices, faces)[bindings.tri]
    mu = anchor + np.einsum("nij,nj->ni", frames, bindings.local_offset)
    q = quat_multiply(rotmat_to_quat(frames), bindings.rel_quat)
    return GaussianLayer(label=layer.label, mu=mu, q=q, s=layer.s.copy(),
                         opacity=layer.opacity.copy(), color=layer.color.copy(),
                         frozen=layer.frozen)


def repose_mesh_lbs(vertices: np.ndarray, grid: LbsGrid,
                    bones: BoneTransforms) -> np.ndarray:
    """Move mesh vertices by their blended bone transforms (weights sampled
    from the baked grid at the canonical positions)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    w = query_weights(grid, vertices)
    T = blend_transforms(w, bones)
    det = np.linalg.det(T[:, :, :3])
    if np.any(det <= 0):
        bad = int(np.argmax(det <= 0))
        raise ValueError(f"degenerate skinning blend at vertex {bad}")
    return np.einsum("nab,nb->na", T[:, :, :3], vertices) + T[:, :, 3]


def cotangent_laplacian(vertices: np.ndarray, faces: np.ndarray) -> sp.csr_matrix:
    """Symmetric cotangent Laplacian L = D - W (positive semi-definite)."""
    n = len(vertices)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    rows, cols, vals = [], [], []
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        # cotangent at corner c opposes edge (a, b)
        e1 = v[f[:, a]] - v[f[:, c]]
        e2 = v[f[:, b]] - v[f[:, c]]
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = 0.5 * np.einsum("ij,ij->i", e1, e2) / np.maximum(cross, 1e-12)
        rows.extend([f[:, a], f[:, b]])
        cols.extend([f[:, b], f[:, a]])
        vals.extend([-cot, -cot])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    W = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    d = -np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(d) + W).tocsr()


def resolve_penetration(outer_vertices: np.ndarray, outer_faces: np.ndarray,
                        inner_vertices: np.ndarray, inner_faces: np.ndarray,
                        clearance: float = DEFAULT_CLEARANCE
                        ) -> np.ndarray:
    """Push outer-mesh vertices that fall inside the inner mesh (winding
    number > 0.5) to its surface plus ``clearance``, propagating the edit
    smoothly through a cotangent-Laplacian soft-constraint solve.

    Returns the deformed outer vertices; raises PenetrationError when
    penetration persists after MAX_RESOLVE_ROUNDS rounds.
    """
    x0 = np.asarray(outer_vertices, dtype=np.float64).copy()
    inner_faces = ensure_outward(np.asarray(inner_vertices, dtype=np.float64),
                                 np.asarray(inner_faces, dtype=np.int64))
    w = winding_numbers(x0, inner_vertices, inner_faces)
    if not np.any(w > 0.5):
        return x0  # untouched by contract

    index = MeshDistanceIndex(inner_vertices, inner_faces)
    frames = _triangle_frames(np.asarray(inner_vertices, dtype=np.float64), inner_faces)
    L = cotangent_laplacian(x0, outer_faces)
    # Degree normalization keeps the smoothness energy O(1) per vertex so
    # the stated constraint weights mean the same thing at any mesh scale.
    d = np.maximum(L.diagonal(), 1e-12)
    L = sp.diags(1.0 / d) @ L
    LtL = (LAPLACIAN_WEIGHT * (L.T @ L)).tocsc()
    delta0 = L @ x0
    x = x0.copy()
    targets = {}
    for round_idx in range(MAX_RESOLVE_ROUNDS):
        pen = np.nonzero(winding_numbers(x, inner_vertices, inner_faces) > 0.5)[0]
        # Soft constraints leave a small residual; re-target constrained
        # vertices that ended short of the clearance, compensating the
        # measured deficit.
        short = []
        if round_idx > 0 and targets:
            c_all = np.fromiter(targets.keys(), dtype=np.int64)
            dist_c, tri_c, closest_c, _ = index.query(x[c_all])
            for i, p in enumerate(c_all):
                deficit = clearance - dist_c[i]
                if deficit > 5e-5 and p not in pen:
                    n = frames[tri_c[i]][:, 2]
                    targets[int(p)] = closest_c[i] + (clearance + deficit) * n
                    short.append(p)
        if pen.size == 0 and not short:
            return x
        if pen.size:
            _, tri, closest, _ = index.query(x[pen])
            normals = frames[tri][:, :, 2]
            for i, p in enumerate(pen):
                targets[int(p)] = closest[i] + clearance * normals[i]

        c_idx = np.fromiter(targets.keys(), dtype=np.int64)
        c_tgt = np.stack([targets[int(i)] for i in c_idx])
        diag = np.full(len(x0), REGULARIZATION_WEIGHT)
        diag[c_idx] = PENETRATION_WEIGHT
        A = (LtL + sp.diags(diag)).tocsc()
        rhs_base = LAPLACIAN_WEIGHT * (L.T @ delta0)
        rhs = rhs_base + REGULARIZATION_WEIGHT * x0
        rhs[c_idx] = rhs_base[c_idx] + PENETRATION_WEIGHT * c_tgt
        solve = spla.factorized(A)
        x = np.stack([solve(rhs[:, k]) for k in range(3)], axis=1)

    pen = np.nonzero(winding_numbers(x, inner_vertices, inner_faces) > 0.5)[0]
    if pen.size:
        raise PenetrationError(int(pen.size))
    return x


@dataclass
class AvatarAsset:
    """A recomposable layer: surfels, extracted mesh, bindings, and (for the
    body) the template that drives posing."""

    layer: GaussianLayer
    vertices: np.ndarray
    faces: np.ndarray
    bindings: Bindings
    template: Optional[SkinnedTemplate] = None
    grid: Optional[LbsGrid] = None


def tryon_compose(body: AvatarAsset, garment: AvatarAsset,
                  theta: np.ndarray, clearance: float = DEFAULT_CLEARANCE
                  ) -> list[GaussianLayer]:
    """Pose both assets with the body's skeleton, resolve garment
    penetration against the posed body, and carry the surfels over their
    deformed meshes. The garment may come from a different subject."""
    if body.template is None or body.grid is None:
        raise ValueError("body asset must carry its template and LBS grid")
    bones = BoneTransforms.from_pose(body.template, theta)
    body_posed = repose_mesh_lbs(body.vertices, body.grid, bones)
    garment_posed = repose_mesh_lbs(garment.vertices, body.grid, bones)
    garment_resolved = resolve_penetration(garment_posed, garment.faces,
                                           body_posed, body.faces, clearance)
    body_layer = transform_attached(body.layer, body.bindings, body_posed, body.faces)
    garment_layer = transform_attached(garment.layer, garment.bindings,
                                       garment_resolved, garment.faces)
    return [body_layer, garment_layer]
