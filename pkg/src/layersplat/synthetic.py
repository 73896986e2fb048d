"""Synthetic dataset generation: a textured procedural subject (humanoid
body plus displaced garment shell) rendered from Fibonacci-sphere cameras
into ground-truth RGB, masks, canonical guidance targets and meshes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (Camera, DEFAULT_SEG_COLORS, GaussianLayer, SkinnedTemplate,
                   look_at_camera, sample_layer_from_mesh)
from .fileio import (atomic_write_text, write_camera, write_face_labels,
                     write_image, write_mesh, write_template)
from .humanoid import make_garment_shell, make_test_humanoid
from .dataset import MANIFEST_MAGIC, MANIFEST_NAME, Dataset, load_dataset
from .rasterizer import render

GT_OPACITY = 0.995

TEXTURES = ("stripes", "checker", "glyphs")


@dataclass
class SyntheticSpec:
    """Controls the generated subject and capture rig."""

    beta: np.ndarray = field(default_factory=lambda: np.zeros(10))
    garment_coverage: float = 0.5
    texture: str = "stripes"
    n_views: int = 16
    n_test_views: int = 8
    n_guidance_views: int = 16
    resolution: int = 256
    seed: int = 0
    camera_distance: float = 2.7
    body_samples: int = 60000
    garment_samples: int = 30000
    subject: str = "synthetic"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        if not 0.0 <= self.garment_coverage <= 1.0:
            raise ValueError("garment coverage must lie in [0, 1]")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.n_views < 4:
            raise ValueError("need at least 4 views")


def fibonacci_sphere_cameras(n: int, distance: float, center: np.ndarray,
                             resolution: int, focal: float) -> list[Camera]:
    """Cameras uniformly distributed over the viewing sphere, looking at
    the subject center."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n):
        y = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(max(1.0 - y * y, 0.0))
        th = golden * i
        eye = center + distance * np.array([r * np.cos(th), y, r * np.sin(th)])
        cams.append(look_at_camera(eye, center, np.array([0.0, 1.0, 0.0]),
                                   fx=focal, fy=focal,
                                   cx=resolution / 2.0, cy=resolution / 2.0,
                                   width=resolution, height=resolution))
    return cams


def _glyph_hash(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    h = (ix * 73856093) ^ (iy * 19349663)
    h = (h ^ (h >> 13)) * 83492791
    return ((h >> 8) & 0xFF).astype(np.float64) / 255.0


def body_texture(points: np.ndarray, kind: str) -> np.ndarray:
    """Position-based body coloring: a muted two-tone pattern."""
    base = np.array([0.82, 0.62, 0.48])
    alt = np.array([0.55, 0.38, 0.30])
    x, y = points[:, 0], points[:, 1]
    if kind == "checker":
        sel = ((np.floor(x / 0.09) + np.floor(y / 0.09)) % 2).astype(bool)
    elif kind == "glyphs":
        sel = _glyph_hash(np.floor(x / 0.07).astype(np.int64),
                          np.floor(y / 0.07).astype(np.int64)) > 0.55
    else:
        sel = (np.floor(y / 0.12) % 2).astype(bool)
    return np.where(sel[:, None], alt, base)


def garment_texture(points: np.ndarray, kind: str) -> np.ndarray:
    c0 = np.array([0.15, 0.25, 0.75])
    c1 = np.array([0.92, 0.85, 0.25])
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    if kind == "checker":
        ang = np.arctan2(z, x)
        sel = ((np.floor(ang / 0.5) + np.floor(y / 0.06)) % 2).astype(bool)
    elif kind == "glyphs":
        ang = np.arctan2(z, x)
        sel = _glyph_hash(np.floor(ang / 0.35).astype(np.int64),
                          np.floor(y / 0.05).astype(np.int64)) > 0.5
    else:
        sel = (np.floor(y / 0.06) % 2).astype(bool)
    return np.where(sel[:, None], c1, c0)


def _textured_layer(vertices, faces, n, label, texture_fn, kind, seed) -> GaussianLayer:
    layer = sample_layer_from_mesh((vertices, faces), n, label=label, seed=seed,
                                   opacity=GT_OPACITY, scale_factor=1.5)
    layer.color[:] = texture_fn(layer.mu, kind)
    return layer


def classify_seg(seg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Label image from a seg-mode render with the default colors:
    0 background, 1 body, 2 garment."""
    scores = np.stack([1.0 - alpha, seg[..., 0], seg[..., 1]], axis=-1)
    return np.argmax(scores, axis=-1).astype(np.int64)


@dataclass
class GroundTruth:
    template: SkinnedTemplate
    body_vertices: np.ndarray
    body_faces: np.ndarray
    garment_vertices: np.ndarray
    garment_faces: np.ndarray
    body_layer: GaussianLayer
    garment_layer: GaussianLayer
    cameras: list
    test_cameras: list
    guidance_cameras: list


def build_subject(spec: SyntheticSpec) -> GroundTruth:
    template = make_test_humanoid(spec.beta)
    gv, gf = make_garment_shell(template, spec.garment_coverage)
    body_layer = _textured_layer(template.vertices, template.faces, spec.body_samples,
                                 "body", body_texture, spec.texture, spec.seed)
    garment_layer = _textured_layer(gv, gf, spec.garment_samples, "garment",
                                    garment_texture, spec.texture, spec.seed + 1)
    center = 0.5 * (template.vertices.min(axis=0) + template.vertices.max(axis=0))
    extent = (template.vertices.max(axis=0) - template.vertices.min(axis=0)).max()
    focal = spec.resolution * spec.camera_distance / (extent * 1.25)
    cams = fibonacci_sphere_cameras(spec.n_views, spec.camera_distance, center,
                                    spec.resolution, focal)
    test_offset = 0.5 * np.pi / max(spec.n_test_views, 1)
    test_center = center + np.array([0.0, 0.007, 0.0])  # avoid duplicating train rig
    test_cams = fibonacci_sphere_cameras(spec.n_test_views, spec.camera_distance * 1.02,
                                         test_center, spec.resolution, focal)
    gcams = fibonacci_sphere_cameras(spec.n_guidance_views, spec.camera_distance,
                                     center + np.array([0.0, -0.005, 0.0]),
                                     spec.resolution, focal)
    return GroundTruth(template=template, body_vertices=template.vertices,
                       body_faces=template.faces, garment_vertices=gv,
                       garment_faces=gf, body_layer=body_layer,
                       garment_layer=garment_layer, cameras=cams,
                       test_cameras=test_cams, guidance_cameras=gcams)


def render_subject_view(gt: GroundTruth, camera: Camera):
    """(rgb, label image) of the composited ground-truth subject."""
    out, _ = render([gt.body_layer, gt.garment_layer], camera, mode="rgb+seg",
                    seg_colors=DEFAULT_SEG_COLORS)
    labels = classify_seg(out.seg, out.alpha)
    return out.rgb, labels


DEFAULT_BENCH_CONFIG = """\
[global]
seed = 0
grid_resolution = 64
tsdf_voxel = 0.012
n_fuse_cameras = 26
garment_distance_threshold = 0.015
dummy_samples = 7000

[stage1]
iterations = 1100
n_init = 9000
guidance_interval = 5
densify_interval = 150
densify_start = 150
densify_stop_frac = 0.6
densify_grad_threshold = 25000
max_splats = 26000

[stage2]
iterations = 450
n_init = 9000
guidance_interval = 5
densify_interval = 150
densify_start = 150
densify_stop_frac = 0.6
densify_grad_threshold = 25000
max_splats = 22000

[stage3]
iterations = 450
n_init = 9000
guidance_interval = 5
densify_interval = 150
densify_start = 150
densify_stop_frac = 0.6
densify_grad_threshold = 25000
max_splats = 22000
scale_split_threshold = 0.01
"""


def generate_synthetic(root, spec: SyntheticSpec) -> Dataset:
    """Write the full dataset tree (train/test views, masks, cameras,
    template, guidance targets, ground-truth meshes, a desk-scale config)
    and return the loaded Dataset."""
    root = Path(root)
    gt = build_subject(spec)
    manifest = [f"{MANIFEST_MAGIC} 1", f"subject {spec.subject}",
                "template template.npz", "theta theta.txt",
                "prompt_whole a photo of a person wearing a bright garment",
                "prompt_inner a photo of a person in a plain body suit",
                "guidance_dir gt/guidance"]

    write_template(root / "template.npz", gt.template)
    atomic_write_text(root / "theta.txt",
                      "\n".join("0" for _ in range(3 * gt.template.n_joints)) + "\n")

    def emit_view(split: str, i: int, cam: Camera):
        name = f"{split}_{i:03d}"
        rgb, labels = render_subject_view(gt, cam)
        write_image(root / f"rgb/{name}.png", rgb)
        write_image(root / f"masks/body_{name}.png", (labels == 1).astype(np.float64))
        write_image(root / f"masks/garment_{name}.png", (labels == 2).astype(np.float64))
        write_camera(root / f"cameras/{name}.cam", cam)
        manifest.append(f"view {split} {name} rgb/{name}.png masks/body_{name}.png "
                        f"masks/garment_{name}.png cameras/{name}.cam")

    for i, cam in enumerate(gt.cameras):
        emit_view("train", i, cam)
    for i, cam in enumerate(gt.test_cameras):
        emit_view("test", i, cam)

    # Canonical guidance targets: composed subject and inner body alone.
    for i, cam in enumerate(gt.guidance_cameras):
        whole, _ = render_subject_view(gt, cam)
        inner_out, _ = render([gt.body_layer], cam)
        write_image(root / f"gt/guidance/whole_{i:03d}.png", whole)
        write_image(root / f"gt/guidance/inner_{i:03d}.png", inner_out.rgb)
        write_camera(root / f"gt/guidance/{i:03d}.cam", cam)

    write_mesh(root / "gt/body_mesh.obj", gt.body_vertices, gt.body_faces)
    write_mesh(root / "gt/garment_mesh.obj", gt.garment_vertices, gt.garment_faces)
    labels = np.concatenate([np.zeros(len(gt.body_faces), dtype=np.int64),
                             np.ones(len(gt.garment_faces), dtype=np.int64)])
    write_face_labels(root / "gt/union_mesh_labels.txt", labels)

    atomic_write_text(root / MANIFEST_NAME, "\n".join(manifest) + "\n")
    atomic_write_text(root / "config.ini", DEFAULT_BENCH_CONFIG)
    return load_dataset(root)
