"""Persistence: the binary surfel-layer format, ASCII triangle meshes,
camera files, skinned-template archives and PNG images.

All writes are atomic (temp file + rename). The layer format is normative:
a text header declaring the count and property list, then little-endian
binary records of 13 float32 fields plus one uint8 label per point.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .core import Camera, GaussianLayer, SkinnedTemplate

PathLike = Union[str, Path]

LAYER_MAGIC = "layersplat_points"
LAYER_PROPERTIES = [
    ("x", "float32"), ("y", "float32"), ("z", "float32"),
    ("qw", "float32"), ("qx", "float32"), ("qy", "float32"), ("qz", "float32"),
    ("su", "float32"), ("sv", "float32"),
    ("opacity", "float32"),
    ("r", "float32"), ("g", "float32"), ("b", "float32"),
    ("layer_label", "uint8"),
]
LABEL_TO_BYTE = {"whole": 0, "body": 1, "garment": 2, "dummy": 3}
BYTE_TO_LABEL = {v: k for k, v in LABEL_TO_BYTE.items()}
_RECORD_BYTES = 13 * 4 + 1


class LayerIOError(Exception):
    pass


class MalformedHeaderError(LayerIOError):
    pass


class TruncatedPayloadError(LayerIOError):
    pass


class UnknownPropertyError(LayerIOError):
    pass


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def layer_to_bytes(layer: GaussianLayer) -> bytes:
    """Serialized form of a layer; numeric fields are stored as float32."""
    n = layer.n
    header = [LAYER_MAGIC, f"count {n}", f"label {layer.label}",
              f"frozen {1 if layer.frozen else 0}"]
    header += [f"property {name} {dtype}" for name, dtype in LAYER_PROPERTIES]
    header.append("end_header")
    rec = np.zeros(n, dtype=_record_dtype())
    rec["x"], rec["y"], rec["z"] = layer.mu.T.astype(np.float32)
    rec["qw"], rec["qx"], rec["qy"], rec["qz"] = layer.q.T.astype(np.float32)
    rec["su"], rec["sv"] = layer.s.T.astype(np.float32)
    rec["opacity"] = layer.opacity.astype(np.float32)
    rec["r"], rec["g"], rec["b"] = layer.color.T.astype(np.float32)
    rec["layer_label"] = LABEL_TO_BYTE[layer.label]
    return "\n".join(header).encode("ascii") + b"\n" + rec.tobytes()


def write_layer(path: PathLike, layer: GaussianLayer) -> None:
    atomic_write_bytes(path, layer_to_bytes(layer))


def _record_dtype() -> np.dtype:
    return np.dtype([(name, "<f4" if dtype == "float32" else "u1")
                     for name, dtype in LAYER_PROPERTIES])


def read_layer(path: PathLike) -> GaussianLayer:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise MalformedHeaderError(f"{path}: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    payload = raw[end + len(b"end_header\n"):]
    if not header or header[0].strip() != LAYER_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic line")
    count = None
    label = None
    frozen = False
    props = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "count" and len(parts) == 2:
            count = int(parts[1])
        elif parts[0] == "label" and len(parts) == 2:
            label = parts[1]
        elif parts[0] == "frozen" and len(parts) == 2:
            frozen = parts[1] == "1"
        elif parts[0] == "property" and len(parts) == 3:
            props.append((parts[1], parts[2]))
        else:
            raise MalformedHeaderError(f"{path}: unrecognized header line {line!r}")
    if count is None or label is None:
        raise MalformedHeaderError(f"{path}: header missing count or label")
    if props != LAYER_PROPERTIES:
        extra = [p for p in props if p not in LAYER_PROPERTIES]
        if extra:
            raise UnknownPropertyError(f"{path}: unknown properties {extra}")
        raise MalformedHeaderError(f"{path}: property list mismatch")
    expected = count * _RECORD_BYTES
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    rec = np.frombuffer(payload, dtype=_record_dtype(), count=count)
    if count:
        labels = np.unique(rec["layer_label"])
        if labels.size != 1 or int(labels[0]) != LABEL_TO_BYTE.get(label, -1):
            raise MalformedHeaderError(f"{path}: per-point labels disagree with header")
    mu = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    q = np.stack([rec["qw"], rec["qx"], rec["qy"], rec["qz"]], axis=1).astype(np.float64)
    s = np.stack([rec["su"], rec["sv"]], axis=1).astype(np.float64)
    return GaussianLayer(label=label, mu=mu, q=q, s=s,
                         opacity=rec["opacity"].astype(np.float64),
                         color=np.stack([rec["r"], rec["g"], rec["b"]], axis=1).astype(np.float64),
                         frozen=frozen)


def write_mesh(path: PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII OBJ (v/f lines only)."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_mesh(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    verts = []
    faces = []
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def write_face_labels(path: PathLike, labels: np.ndarray) -> None:
    atomic_write_text(path, "\n".join(str(int(v)) for v in labels) + "\n")


def read_face_labels(path: PathLike) -> np.ndarray:
    return np.array([int(v) for v in Path(path).read_text().split()], dtype=np.int64)


def write_camera(path: PathLike, camera: Camera) -> None:
    rot = " ".join(f"{v:.17g}" for v in camera.rotation.ravel())
    tr = " ".join(f"{v:.17g}" for v in camera.translation)
    text = (f"fx {camera.fx:.17g}\nfy {camera.fy:.17g}\n"
            f"cx {camera.cx:.17g}\ncy {camera.cy:.17g}\n"
            f"width {camera.width}\nheight {camera.height}\n"
            f"rotation {rot}\ntranslation {tr}\n")
    atomic_write_text(path, text)


class InvalidCameraError(ValueError):
    pass


def read_camera(path: PathLike) -> Camera:
    fields = {}
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if parts:
                fields[parts[0]] = parts[1:]
    try:
        cam = Camera(fx=float(fields["fx"][0]), fy=float(fields["fy"][0]),
                     cx=float(fields["cx"][0]), cy=float(fields["cy"][0]),
                     width=int(fields["width"][0]), height=int(fields["height"][0]),
                     rotation=np.array([float(v) for v in fields["rotation"]]).reshape(3, 3),
                     translation=np.array([float(v) for v in fields["translation"]]))
    except KeyError as e:
        raise InvalidCameraError(f"{path}: missing camera field {e}") from e
    except ValueError as e:
        raise InvalidCameraError(f"{path}: {e}") from e
    return cam


def write_template(path: PathLike, template: SkinnedTemplate) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez_compressed(tmp, vertices=template.vertices, faces=template.faces,
                            joint_positions=template.joint_positions,
                            joint_parents=template.joint_parents,
                            weights=template.weights, beta=template.beta,
                            theta=template.theta)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_template(path: PathLike) -> SkinnedTemplate:
    with np.load(path) as data:
        return SkinnedTemplate(vertices=data["vertices"], faces=data["faces"],
                               joint_positions=data["joint_positions"],
                               joint_parents=data["joint_parents"],
                               weights=data["weights"], beta=data["beta"],
                               theta=data["theta"])


def write_image(path: PathLike, image: np.ndarray) -> None:
    """Float [0,1] (H,W) or (H,W,3) -> 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_image(path: PathLike) -> np.ndarray:
    """8-bit PNG -> float64 in [0,1]; grayscale stays (H, W)."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def read_mask(path: PathLike) -> np.ndarray:
    """Single-channel mask image binarized at 0.5."""
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr >= 0.5
