"""Dataset ingestion: a line-oriented manifest pointing at per-view RGB
images, body/garment masks and camera files, plus the skinned template and
the capture pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Camera, SkinnedTemplate
from .fileio import (InvalidCameraError, read_camera, read_image, read_mask,
                     read_template)

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "layersplat_dataset"


class DatasetError(Exception):
    pass


@dataclass
class View:
    name: str
    rgb: np.ndarray          # (H, W, 3) float in [0, 1]
    mask_body: np.ndarray    # (H, W) bool
    mask_garment: np.ndarray
    camera: Camera

    @property
    def mask_fg(self) -> np.ndarray:
        return self.mask_body | self.mask_garment

    def label_image(self) -> np.ndarray:
        """(H, W) ints: 0 background, 1 body, 2 garment."""
        out = np.zeros(self.rgb.shape[:2], dtype=np.int64)
        out[self.mask_body] = 1
        out[self.mask_garment] = 2
        return out


@dataclass
class Dataset:
    root: Path
    subject: str
    template: SkinnedTemplate
    theta: np.ndarray
    views: list
    test_views: list = field(default_factory=list)
    prompt_whole: str = ""
    prompt_inner: str = ""
    guidance_dir: Optional[Path] = None

    @property
    def resolution(self) -> tuple[int, int]:
        cam = self.views[0].camera
        return cam.height, cam.width


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    return path


def _load_view(root: Path, name: str, rgb_rel: str, body_rel: str,
               garment_rel: str, cam_rel: str) -> View:
    rgb = read_image(_require(root / rgb_rel))
    if rgb.ndim != 3:
        raise DatasetError(f"{rgb_rel}: expected a color image")
    mask_body = read_mask(_require(root / body_rel))
    mask_garment = read_mask(_require(root / garment_rel))
    camera = read_camera(_require(root / cam_rel))
    shape = rgb.shape[:2]
    if mask_body.shape != shape or mask_garment.shape != shape:
        raise DatasetError(f"view {name}: mask resolution does not match the image")
    if (camera.height, camera.width) != shape:
        raise DatasetError(f"view {name}: camera extent does not match the image")
    overlap = mask_body & mask_garment
    if overlap.any():
        raise DatasetError(f"view {name}: body and garment masks overlap "
                           f"({int(overlap.sum())} pixels)")
    return View(name=name, rgb=rgb[..., :3], mask_body=mask_body,
                mask_garment=mask_garment, camera=camera)


def load_dataset(root) -> Dataset:
    """Parse and validate the manifest; loads all referenced files."""
    root = Path(root)
    manifest = _require(root / MANIFEST_NAME)
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split()[0] != MANIFEST_MAGIC:
        raise DatasetError(f"{manifest}: not a dataset manifest")
    subject = "unknown"
    template_path = None
    theta_path = None
    prompts = {"whole": "", "inner": ""}
    guidance_dir = None
    view_specs = []
    for ln in lines[1:]:
        parts = ln.split()
        if not parts or parts[0].startswith("#"):
            continue
        key = parts[0]
        if key == "subject":
            subject = " ".join(parts[1:])
        elif key == "template":
            template_path = root / parts[1]
        elif key == "theta":
            theta_path = root / parts[1]
        elif key == "prompt_whole":
            prompts["whole"] = " ".join(parts[1:])
        elif key == "prompt_inner":
            prompts["inner"] = " ".join(parts[1:])
        elif key == "guidance_dir":
            guidance_dir = root / parts[1]
        elif key == "view":
            if len(parts) != 7:
                raise DatasetError(f"{manifest}: bad view line: {ln!r}")
            view_specs.append(parts[1:])
        else:
            raise DatasetError(f"{manifest}: unrecognized manifest key {key!r}")
    if template_path is None:
        raise DatasetError(f"{manifest}: missing template entry")
    template = read_template(_require(template_path))
    theta = (np.array([float(v) for v in _require(theta_path).read_text().split()])
             if theta_path else np.zeros(3 * template.n_joints))
    if theta.shape[0] != 3 * template.n_joints:
        raise DatasetError("theta length does not match the template joint count")

    views, test_views = [], []
    for split, name, rgb_rel, body_rel, garment_rel, cam_rel in view_specs:
        view = _load_view(root, name, rgb_rel, body_rel, garment_rel, cam_rel)
        if split == "train":
            views.append(view)
        elif split == "test":
            test_views.append(view)
        else:
            raise DatasetError(f"unknown view split {split!r}")
    if not views:
        raise DatasetError("dataset has no training views")
    res = views[0].rgb.shape[:2]
    for v in views + test_views:
        if v.rgb.shape[:2] != res:
            raise DatasetError(f"view {v.name}: resolution differs from the first view")
    return Dataset(root=root, subject=subject, template=template, theta=theta,
                   views=views, test_views=test_views,
                   prompt_whole=prompts["whole"], prompt_inner=prompts["inner"],
                   guidance_dir=guidance_dir)
