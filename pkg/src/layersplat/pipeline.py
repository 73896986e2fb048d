"""Three-stage training orchestration.

Stage 1 reconstructs and inpaints a single whole-subject layer, extracts
the fused mesh, labels it, and peels off the coarse garment layer.
Stage 2 freezes that garment and optimizes the inner body under masked
photometric, segmentation, split depth-distortion (with a frozen template
dummy) and inner guidance. Stage 3 freezes the body and refines the outer
garment with the coarse-mesh dummy and the try-on scaling constraint.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import PipelineConfig, StageConfig
from .core import (Camera, DEFAULT_SEG_COLORS, GaussianLayer, LbsGrid,
                   SkinnedTemplate, sample_layer_from_mesh)
from .dataset import Dataset, View, load_dataset
from .fileio import (layer_to_bytes, read_camera, read_image, read_layer,
                     read_mesh, read_template, write_face_labels, write_layer,
                     write_mesh, write_template)
from .guidance import (GuidanceRequest, GuidanceUnavailable, HttpGuidance,
                       annealed_t_range, mock_guidance)
from .humanoid import make_test_humanoid
from .imageproc import psnr, ssim
from .losses import (depth_distortion, depth_distortion_split,
                     guidance_gradient, normal_consistency, rgb_loss,
                     segmentation_loss)
from .meshing import (AvatarAsset, Bindings, GARMENT_LABEL, LabeledMesh,
                      attach_gaussians, extract_garment_gaussians,
                      label_mesh_by_votes, marching_cubes, repose_mesh_lbs,
                      tsdf_fuse)
from .optim import (OptimState, accumulate_densify_stats, adam_step,
                    densify_and_prune, enforce_scale_constraint)
from .rasterizer import RenderGrads, backward, render
from .skinning import (BoneTransforms, bake_lbs_grid, build_dummy_layer,
                       pose_backward, pose_gaussians)
from .synthetic import fibonacci_sphere_cameras

log = logging.getLogger(__name__)


def set_threads(n: int) -> None:
    """Cap numba's internal parallelism; 0 leaves the default."""
    if n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# guidance rig


class GuidanceRig:
    """Guidance cameras plus a client factory. ``kind`` selects the whole-
    subject or inner-body target set (mock) / prompt intent (live)."""

    def __init__(self, cameras: list, make_client: Optional[Callable],
                 template: SkinnedTemplate):
        self.cameras = cameras
        self._make_client = make_client
        self.template = template
        self.skipped = 0

    @property
    def active(self) -> bool:
        return self._make_client is not None and len(self.cameras) > 0

    def gradient(self, image: np.ndarray, kind: str, cam_index: int,
                 prompt: str, guidance_scale: float, progress: float,
                 seed: int) -> Optional[np.ndarray]:
        client = self._make_client(kind, cam_index)
        if client is None:
            return None
        kp, _ = self.cameras[cam_index].project(self.template.joint_positions)
        keypoints = np.concatenate([kp, np.ones((kp.shape[0], 1))], axis=1)
        request = GuidanceRequest(image=image, prompt=prompt,
                                  pose_keypoints=keypoints,
                                  t_range=annealed_t_range(progress),
                                  guidance_scale=guidance_scale, seed=seed)
        try:
            return guidance_gradient(client, request).grads.rgb
        except GuidanceUnavailable as e:
            self.skipped += 1
            log.warning("guidance step skipped: %s", e)
            return None


def make_guidance_rig(spec: str, dataset: Dataset, pcfg: PipelineConfig) -> GuidanceRig:
    """Parse the --guidance flag: off | mock:<dir> | http:<url>."""
    template = dataset.template
    if spec == "off":
        return GuidanceRig([], None, template)
    if spec.startswith("mock:"):
        gdir = Path(spec[len("mock:"):])
        if not gdir.is_absolute():
            gdir = dataset.root / gdir
        cameras = []
        targets = {"whole": [], "inner": []}
        i = 0
        while (gdir / f"{i:03d}.cam").exists():
            cameras.append(read_camera(gdir / f"{i:03d}.cam"))
            targets["whole"].append(read_image(gdir / f"whole_{i:03d}.png"))
            targets["inner"].append(read_image(gdir / f"inner_{i:03d}.png"))
            i += 1
        if not cameras:
            raise FileNotFoundError(f"no guidance targets found under {gdir}")

        def make_client(kind, idx):
            return mock_guidance(targets[kind][idx], weight=1.0)

        return GuidanceRig(cameras, make_client, template)
    if spec.startswith("http:"):
        url = spec[len("http:"):].lstrip(":/")
        client = HttpGuidance("http://" + url if not url.startswith("http") else url)
        h, w = dataset.resolution
        center = 0.5 * (template.vertices.min(axis=0) + template.vertices.max(axis=0))
        extent = (template.vertices.max(axis=0) - template.vertices.min(axis=0)).max()
        cam0 = dataset.views[0].camera
        dist = float(np.linalg.norm(cam0.center - center))
        cameras = fibonacci_sphere_cameras(16, dist, center, w, cam0.fx)
        return GuidanceRig(cameras, lambda kind, idx: client, template)
    raise ValueError(f"unknown guidance spec {spec!r}")


# ---------------------------------------------------------------------------
# shared training machinery


@dataclass
class TrainHistory:
    iterations: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)

    def add(self, it: int, **values):
        self.iterations.append(it)
        for k, v in values.items():
            self.terms.setdefault(k, []).append(float(v))


class _ViewSampler:
    def __init__(self, n_views: int, rng: np.random.Generator):
        self.n = n_views
        self.rng = rng
        self.order = []

    def next(self) -> int:
        if not self.order:
            self.order = list(self.rng.permutation(self.n))
        return int(self.order.pop())


def _maybe_checkpoint(layer: GaussianLayer, cfg: StageConfig, it: int,
                      outdir: Optional[Path], stage_name: str) -> None:
    if outdir is None or cfg.checkpoint_interval <= 0:
        return
    if (it + 1) % cfg.checkpoint_interval == 0:
        write_layer(outdir / "checkpoints" / f"{stage_name}_{it + 1:06d}.layer", layer)


def _pose_static(layer: GaussianLayer, grid: LbsGrid, bones: BoneTransforms,
                 identity: bool) -> GaussianLayer:
    return layer if identity else pose_gaussians(layer, grid, bones)


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    layer: GaussianLayer
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    labeled: LabeledMesh
    garment_vertices: np.ndarray
    garment_faces: np.ndarray
    coarse_garment: GaussianLayer
    remainder: GaussianLayer
    history: TrainHistory
    fuse_cameras: list


def _fuse_cameras_for(template: SkinnedTemplate, n: int, resolution: tuple) -> list:
    center = 0.5 * (template.vertices.min(axis=0) + template.vertices.max(axis=0))
    extent = (template.vertices.max(axis=0) - template.vertices.min(axis=0)).max()
    h, w = resolution
    dist = 1.6 * extent
    focal = w * dist / (extent * 1.25)
    return fibonacci_sphere_cameras(n, dist, center, w, focal)


def stage1(dataset: Dataset, cfg: StageConfig, pcfg: PipelineConfig,
           guidance: GuidanceRig, outdir: Optional[Path] = None) -> Stage1Result:
    template = dataset.template
    rng = np.random.default_rng(cfg.seed)
    layer = sample_layer_from_mesh(template, cfg.n_init, "whole", seed=cfg.seed)
    state = OptimState.for_layer(layer)
    grid = bake_lbs_grid(template, (pcfg.grid_resolution,) * 3)
    bones = BoneTransforms.from_pose(template, dataset.theta)
    identity = bool(np.allclose(dataset.theta, 0.0))
    sampler = _ViewSampler(len(dataset.views), rng)
    lrs = cfg.learning_rates()
    dcfg = cfg.densify_config()
    history = TrainHistory()

    for it in range(cfg.iterations):
        view = dataset.views[sampler.next()]
        if identity:
            posed, pinfo = layer, None
        else:
            posed, pinfo = pose_gaussians(layer, grid, bones, return_info=True)
        out, ctx = render([posed], view.camera)
        t_rgb = rgb_loss(out.rgb, view.rgb, lambda_c=cfg.lambda_c)
        t_dist = depth_distortion(out)
        t_norm = normal_consistency(out, view.camera)
        bundle = RenderGrads.accumulate([
            (cfg.w_rgb, t_rgb.grads),
            (cfg.w_distortion, t_dist.grads),
            (cfg.w_normal, t_norm.grads),
        ])
        g = backward(ctx, bundle)[0]
        if pinfo is not None:
            pose_backward(g, pinfo)
        accumulate_densify_stats(state, g, posed, view.camera)

        if guidance.active and it % cfg.guidance_interval == 0:
            gidx = int(rng.integers(len(guidance.cameras)))
            gout, gctx = render([layer], guidance.cameras[gidx])
            ggrad = guidance.gradient(gout.rgb, "whole", gidx, cfg.prompt or
                                      dataset.prompt_whole, cfg.guidance_scale,
                                      it / max(cfg.iterations - 1, 1),
                                      seed=cfg.seed * 100003 + it)
            if ggrad is not None:
                g += backward(gctx, RenderGrads(rgb=cfg.w_sds * ggrad))[0]

        adam_step(layer, g, state, lrs.at(it, cfg.iterations))
        if cfg.in_densify_window(it) and layer.n < cfg.max_splats:
            rep = densify_and_prune(layer, state, dcfg)
            log.info("stage1 it=%d densify: +%d clone +%d split -%d prune -> %d",
                     it + 1, rep.n_cloned, rep.n_split, rep.n_pruned, rep.n_after)
        history.add(it, rgb=t_rgb.value, distortion=t_dist.value, normal=t_norm.value)
        _maybe_checkpoint(layer, cfg, it, outdir, "stage1")

    # Mesh extraction on the canonical layer from a virtual camera rig.
    fuse_cams = _fuse_cameras_for(template, pcfg.n_fuse_cameras, dataset.resolution)
    vol = tsdf_fuse([layer], fuse_cams, voxel_size=pcfg.tsdf_voxel,
                    truncation=pcfg.tsdf_truncation_factor * pcfg.tsdf_voxel)
    verts, faces = marching_cubes(vol)

    # Vote garment labels from the dataset masks; the mesh is posed to the
    # capture pose so the votes align with the images.
    vote_verts = verts if identity else repose_mesh_lbs(verts, grid, bones)
    labeled_posed = label_mesh_by_votes(vote_verts, faces,
                                        [v.camera for v in dataset.views],
                                        [v.label_image() for v in dataset.views])
    labeled = LabeledMesh(vertices=verts, faces=faces,
                          face_labels=labeled_posed.face_labels)
    gv, gf = labeled.submesh(GARMENT_LABEL)
    if len(gf) == 0:
        raise RuntimeError("label voting produced no garment faces")
    coarse, remainder = extract_garment_gaussians(
        layer, gv, gf, threshold=pcfg.garment_distance_threshold)
    return Stage1Result(layer=layer, mesh_vertices=verts, mesh_faces=faces,
                        labeled=labeled, garment_vertices=gv, garment_faces=gf,
                        coarse_garment=coarse, remainder=remainder,
                        history=history, fuse_cameras=fuse_cams)


# ---------------------------------------------------------------------------
# stage 2


def stage2(dataset: Dataset, coarse_garment: GaussianLayer, cfg: StageConfig,
           pcfg: PipelineConfig, guidance: GuidanceRig,
           outdir: Optional[Path] = None) -> tuple[GaussianLayer, TrainHistory]:
    template = dataset.template
    rng = np.random.default_rng(cfg.seed)
    body = sample_layer_from_mesh(template, cfg.n_init, "body", seed=cfg.seed)
    garment = coarse_garment.copy(frozen=True)
    dummy = build_dummy_layer(template, pcfg.dummy_samples, seed=cfg.seed)
    state = OptimState.for_layer(body)
    grid = bake_lbs_grid(template, (pcfg.grid_resolution,) * 3)
    bones = BoneTransforms.from_pose(template, dataset.theta)
    identity = bool(np.allclose(dataset.theta, 0.0))
    garment_posed = _pose_static(garment, grid, bones, identity)
    dummy_posed = _pose_static(dummy, grid, bones, identity)
    sampler = _ViewSampler(len(dataset.views), rng)
    lrs = cfg.learning_rates()
    dcfg = cfg.densify_config()
    history = TrainHistory()

    for it in range(cfg.iterations):
        view = dataset.views[sampler.next()]
        if identity:
            posed, pinfo = body, None
        else:
            posed, pinfo = pose_gaussians(body, grid, bones, return_info=True)

        out, ctx = render([posed, garment_posed], view.camera, mode="rgb+seg",
                          seg_colors=DEFAULT_SEG_COLORS)
        body_out, body_ctx = render([posed], view.camera)
        dummy_out, dummy_ctx = render([dummy_posed, posed], view.camera)

        t_rgb = rgb_loss(out.rgb, view.rgb, mask=view.mask_fg, lambda_c=cfg.lambda_c)
        t_seg = segmentation_loss(out.seg, {"body": view.mask_body,
                                            "garment": view.mask_garment,
                                            "bg": ~view.mask_fg}, DEFAULT_SEG_COLORS)
        t_norm = normal_consistency(out, view.camera)
        t_split = depth_distortion_split(body_out, seen_mask=view.mask_body,
                                         occluded_mask=view.mask_garment,
                                         dummy_out=dummy_out)
        bundle = RenderGrads.accumulate([
            (cfg.w_rgb, t_rgb.grads),
            (cfg.w_seg, t_seg.grads),
            (cfg.w_normal, t_norm.grads),
        ])
        g = backward(ctx, bundle)[0]
        g += backward(body_ctx, t_split.grads.scaled(cfg.w_distortion))[0]
        g += backward(dummy_ctx, t_split.dummy_grads.scaled(cfg.w_distortion))[1]
        if pinfo is not None:
            pose_backward(g, pinfo)
        accumulate_densify_stats(state, g, posed, view.camera)

        if guidance.active and it % cfg.guidance_interval == 0:
            gidx = int(rng.integers(len(guidance.cameras)))
            gout, gctx = render([body], guidance.cameras[gidx])
            ggrad = guidance.gradient(gout.rgb, "inner", gidx, cfg.prompt or
                                      dataset.prompt_inner, cfg.guidance_scale,
                                      it / max(cfg.iterations - 1, 1),
                                      seed=cfg.seed * 100003 + it)
            if ggrad is not None:
                g += backward(gctx, RenderGrads(rgb=cfg.w_sds * ggrad))[0]

        adam_step(body, g, state, lrs.at(it, cfg.iterations))
        if cfg.in_densify_window(it) and body.n < cfg.max_splats:
            densify_and_prune(body, state, dcfg)
        history.add(it, rgb=t_rgb.value, seg=t_seg.value, normal=t_norm.value,
                    distortion=t_split.value)
        _maybe_checkpoint(body, cfg, it, outdir, "stage2")
    return body, history


# ---------------------------------------------------------------------------
# stage 3


def stage3(dataset: Dataset, body: GaussianLayer, garment_vertices: np.ndarray,
           garment_faces: np.ndarray, coarse_garment: GaussianLayer,
           cfg: StageConfig, pcfg: PipelineConfig, guidance: GuidanceRig,
           outdir: Optional[Path] = None) -> tuple[GaussianLayer, TrainHistory]:
    template = dataset.template
    rng = np.random.default_rng(cfg.seed)
    body = body.copy(frozen=True)
    outer = sample_layer_from_mesh((garment_vertices, garment_faces),
                                   cfg.n_init, "garment", seed=cfg.seed)
    # Seed appearance from the coarse layer (nearest surfel).
    if coarse_garment.n:
        from scipy.spatial import cKDTree
        tree = cKDTree(coarse_garment.mu)
        _, nn = tree.query(outer.mu)
        outer.color[:] = coarse_garment.color[nn]
        outer.opacity[:] = np.clip(coarse_garment.opacity[nn], 0.05, 0.95)
    dummy = build_dummy_layer((garment_vertices, garment_faces),
                              pcfg.dummy_samples, seed=cfg.seed)
    state = OptimState.for_layer(outer)
    grid = bake_lbs_grid(template, (pcfg.grid_resolution,) * 3)
    bones = BoneTransforms.from_pose(template, dataset.theta)
    identity = bool(np.allclose(dataset.theta, 0.0))
    body_posed = _pose_static(body, grid, bones, identity)
    dummy_posed = _pose_static(dummy, grid, bones, identity)
    sampler = _ViewSampler(len(dataset.views), rng)
    lrs = cfg.learning_rates()
    dcfg = cfg.densify_config()
    history = TrainHistory()

    for it in range(cfg.iterations):
        view = dataset.views[sampler.next()]
        if identity:
            posed, pinfo = outer, None
        else:
            posed, pinfo = pose_gaussians(outer, grid, bones, return_info=True)

        out, ctx = render([body_posed, posed], view.camera, mode="rgb+seg",
                          seg_colors=DEFAULT_SEG_COLORS)
        dummy_out, dummy_ctx = render([dummy_posed, posed], view.camera)

        if not view.mask_garment.any():
            t_rgb = rgb_loss(out.rgb, view.rgb, mask=view.mask_fg, lambda_c=cfg.lambda_c)
        else:
            t_rgb = rgb_loss(out.rgb, view.rgb, mask=view.mask_garment,
                             lambda_c=cfg.lambda_c)
        t_seg = segmentation_loss(out.seg, {"body": view.mask_body,
                                            "garment": view.mask_garment,
                                            "bg": ~view.mask_fg}, DEFAULT_SEG_COLORS)
        # Geometry regularizers on both the inner+outer and dummy+outer
        # compositions.
        t_norm_a = normal_consistency(out, view.camera)
        t_dist_a = depth_distortion(out)
        t_norm_b = normal_consistency(dummy_out, view.camera)
        t_dist_b = depth_distortion(dummy_out)

        bundle = RenderGrads.accumulate([
            (cfg.w_rgb, t_rgb.grads),
            (cfg.w_seg, t_seg.grads),
            (cfg.w_normal, t_norm_a.grads),
            (cfg.w_distortion, t_dist_a.grads),
        ])
        g = backward(ctx, bundle)[1]
        dummy_bundle = RenderGrads.accumulate([
            (cfg.w_normal, t_norm_b.grads),
            (cfg.w_distortion, t_dist_b.grads),
        ])
        g += backward(dummy_ctx, dummy_bundle)[1]
        if pinfo is not None:
            pose_backward(g, pinfo)
        accumulate_densify_stats(state, g, posed, view.camera)

        if guidance.active and it % cfg.guidance_interval == 0:
            gidx = int(rng.integers(len(guidance.cameras)))
            gout, gctx = render([body, outer], guidance.cameras[gidx])
            ggrad = guidance.gradient(gout.rgb, "whole", gidx, cfg.prompt or
                                      dataset.prompt_whole, cfg.guidance_scale,
                                      it / max(cfg.iterations - 1, 1),
                                      seed=cfg.seed * 100003 + it)
            if ggrad is not None:
                g += backward(gctx, RenderGrads(rgb=cfg.w_sds * ggrad))[1]

        adam_step(outer, g, state, lrs.at(it, cfg.iterations))
        if cfg.in_densify_window(it) and outer.n < cfg.max_splats:
            densify_and_prune(outer, state, dcfg)
        history.add(it, rgb=t_rgb.value, seg=t_seg.value,
                    normal=t_norm_a.value + t_norm_b.value,
                    distortion=t_dist_a.value + t_dist_b.value)
        _maybe_checkpoint(outer, cfg, it, outdir, "stage3")

    if cfg.scale_split_threshold is not None:
        n = enforce_scale_constraint(outer, state, cfg.scale_split_threshold)
        if n:
            log.info("stage3 final scale constraint split %d surfels", n)
    return outer, history


# ---------------------------------------------------------------------------
# assets and run-all


def save_asset(outdir: Path, asset: AvatarAsset) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_layer(outdir / "layer.layer", asset.layer)
    write_mesh(outdir / "mesh.obj", asset.vertices, asset.faces)
    np.savez_compressed(outdir / "bindings.npz", tri=asset.bindings.tri,
                        bary=asset.bindings.bary,
                        local_offset=asset.bindings.local_offset,
                        rel_quat=asset.bindings.rel_quat,
                        n_faces=asset.bindings.n_faces,
                        n_vertices=asset.bindings.n_vertices)
    if asset.template is not None:
        write_template(outdir / "template.npz", asset.template)


def load_asset(path, grid_resolution: int = 64) -> AvatarAsset:
    path = Path(path)
    layer = read_layer(path / "layer.layer")
    verts, faces = read_mesh(path / "mesh.obj")
    with np.load(path / "bindings.npz") as d:
        bindings = Bindings(tri=d["tri"], bary=d["bary"],
                            local_offset=d["local_offset"], rel_quat=d["rel_quat"],
                            n_faces=int(d["n_faces"]), n_vertices=int(d["n_vertices"]))
    template = None
    grid = None
    if (path / "template.npz").exists():
        template = read_template(path / "template.npz")
        grid = bake_lbs_grid(template, (grid_resolution,) * 3)
    return AvatarAsset(layer=layer, vertices=verts, faces=faces,
                       bindings=bindings, template=template, grid=grid)


def _evaluate_views(layers: list, views: list) -> list[dict]:
    rows = []
    for view in views:
        out, _ = render(layers, view.camera, keep_records=False)
        rows.append({"view": view.name,
                     "psnr": psnr(out.rgb, view.rgb),
                     "ssim": ssim(out.rgb, view.rgb)})
    return rows


def _mean(rows: list[dict], key: str) -> float:
    vals = [r[key] for r in rows]
    return float(np.mean(vals))


def run_all(dataset_root, config: PipelineConfig, outdir,
            guidance_spec: Optional[str] = None) -> dict:
    """Full pipeline on a dataset: three stages, mesh extraction,
    attachment, held-out evaluation, and artifact/report writing."""
    t_start = time.time()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_root if isinstance(dataset_root, Dataset) else load_dataset(dataset_root)
    config = config.seeded()
    guidance = make_guidance_rig(guidance_spec or config.guidance, dataset, config)

    s1 = stage1(dataset, config.stage1, config, guidance, outdir)
    write_layer(outdir / "stage1" / "whole.layer", s1.layer)
    write_mesh(outdir / "stage1" / "whole_mesh.obj", s1.mesh_vertices, s1.mesh_faces)
    write_face_labels(outdir / "stage1" / "whole_mesh.labels", s1.labeled.face_labels)
    write_mesh(outdir / "stage1" / "garment_mesh.obj", s1.garment_vertices, s1.garment_faces)
    write_layer(outdir / "stage1" / "coarse_garment.layer", s1.coarse_garment)

    frozen_before = layer_to_bytes(s1.coarse_garment)
    body, hist2 = stage2(dataset, s1.coarse_garment, config.stage2, config,
                         guidance, outdir)
    frozen_after = layer_to_bytes(s1.coarse_garment)
    if frozen_before != frozen_after:
        raise RuntimeError("freeze contract violated: coarse garment changed in stage 2")
    write_layer(outdir / "stage2" / "body.layer", body)

    rows_stage2 = _evaluate_views([body, s1.coarse_garment], dataset.test_views)

    body_bytes_before = layer_to_bytes(body)
    garment, hist3 = stage3(dataset, body, s1.garment_vertices, s1.garment_faces,
                            s1.coarse_garment, config.stage3, config, guidance, outdir)
    if layer_to_bytes(body) != body_bytes_before:
        raise RuntimeError("freeze contract violated: body changed in stage 3")
    write_layer(outdir / "stage3" / "garment.layer", garment)

    rows_stage3 = _evaluate_views([body, garment], dataset.test_views)

    # Final meshes and attachments for try-on assets.
    fuse_cams = s1.fuse_cameras
    body_vol = tsdf_fuse([body], fuse_cams, voxel_size=config.tsdf_voxel,
                         truncation=config.tsdf_truncation_factor * config.tsdf_voxel)
    body_verts, body_faces = marching_cubes(body_vol)
    garment_vol = tsdf_fuse([garment], fuse_cams, voxel_size=config.tsdf_voxel,
                            truncation=config.tsdf_truncation_factor * config.tsdf_voxel)
    garment_verts, garment_faces = marching_cubes(garment_vol)

    grid = bake_lbs_grid(dataset.template, (config.grid_resolution,) * 3)
    body_asset = AvatarAsset(layer=body.copy(frozen=False),
                             vertices=body_verts, faces=body_faces,
                             bindings=attach_gaussians(body, body_verts, body_faces),
                             template=dataset.template, grid=grid)
    garment_asset = AvatarAsset(layer=garment.copy(),
                                vertices=garment_verts, faces=garment_faces,
                                bindings=attach_gaussians(garment, garment_verts,
                                                          garment_faces))
    save_asset(outdir / "assets" / "body", body_asset)
    save_asset(outdir / "assets" / "garment", garment_asset)

    from .report import write_run_report
    summary = {
        "subject": dataset.subject,
        "psnr_stage2": _mean(rows_stage2, "psnr"),
        "ssim_stage2": _mean(rows_stage2, "ssim"),
        "psnr_stage3": _mean(rows_stage3, "psnr"),
        "ssim_stage3": _mean(rows_stage3, "ssim"),
        "n_body": body.n,
        "n_garment": garment.n,
        "max_garment_scale": float(garment.s.max()),
        "guidance_skipped": guidance.skipped,
        "runtime_sec": time.time() - t_start,
    }
    write_run_report(outdir / "eval", rows_stage2, rows_stage3,
                     {"stage1": s1.history, "stage2": hist2, "stage3": hist3},
                     summary)
    return summary


def output_hashes(outdir) -> dict:
    """Stable content hashes of every artifact a run writes (for the
    determinism contract)."""
    outdir = Path(outdir)
    hashes = {}
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.suffix in (".layer", ".obj", ".npz", ".labels"):
            hashes[str(p.relative_to(outdir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes
