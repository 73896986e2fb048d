"""Command-line interface.

Subcommands: gen-synthetic, stage1, stage2, stage3, run-all, mesh, tryon,
render, eval. Global flags --seed / --threads / --guidance / --config apply
everywhere; LAYERGS_THREADS is the environment fallback for --threads.
Exit code 0 on success, 1 with a machine-parsable ``error:`` line on
failure, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layersplat",
                                description="Layered surfel avatars: reconstruct, "
                                            "decompose, inpaint, recompose.")
    p.add_argument("--seed", type=int, default=None, help="global RNG seed")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("LAYERGS_THREADS", "0")),
                   help="cap internal parallelism (0 = auto)")
    p.add_argument("--guidance", default=None,
                   help="guidance source: mock:<target-dir> | http:<url> | off")
    p.add_argument("--config", default=None, help="INI config file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--test-views", type=int, default=8)
    g.add_argument("--guidance-views", type=int, default=16)
    g.add_argument("--resolution", type=int, default=256)
    g.add_argument("--coverage", type=float, default=0.5)
    g.add_argument("--texture", default="stripes")
    g.add_argument("--subject", default="synthetic")
    g.add_argument("--beta", type=float, nargs="*", default=None)

    for name in ("stage1", "stage2", "stage3", "run-all"):
        s = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        s.add_argument("--dataset", required=True)
        s.add_argument("--out", required=True)
        if name in ("stage2", "stage3"):
            s.add_argument("--stage1-dir", default=None,
                           help="output dir of the stage1 run (defaults to --out)")
        if name == "stage3":
            s.add_argument("--body", default=None,
                           help="body layer file (defaults to <out>/stage2/body.layer)")

    m = sub.add_parser("mesh", help="fuse layers into a mesh")
    m.add_argument("--layers", nargs="+", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--voxel", type=float, default=None)
    m.add_argument("--cameras", type=int, default=None)

    t = sub.add_parser("tryon", help="cross-subject garment recomposition")
    t.add_argument("--body", required=True, help="body asset directory")
    t.add_argument("--garment", required=True, help="garment asset directory")
    t.add_argument("--pose", required=True, help="pose file (3J axis-angle floats)")
    t.add_argument("--out", required=True)
    t.add_argument("--render-views", type=int, default=4)

    r = sub.add_parser("render", help="render layers under a camera")
    r.add_argument("--layers", nargs="+", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("rgb", "seg"), default="rgb")

    e = sub.add_parser("eval", help="PSNR/SSIM between two image directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    return p


def _load_cfg(args):
    from .config import load_config
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("global", {})["seed"] = args.seed
    if args.threads:
        overrides.setdefault("global", {})["threads"] = args.threads
    if args.guidance is not None:
        overrides.setdefault("global", {})["guidance"] = args.guidance
    cfg_path = args.config
    if cfg_path is None and getattr(args, "dataset", None):
        candidate = Path(args.dataset) / "config.ini"
        if candidate.exists():
            cfg_path = candidate
    return load_config(cfg_path, overrides)


def _cmd_gen_synthetic(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic
    spec = SyntheticSpec(
        beta=np.array(args.beta + [0.0] * (10 - len(args.beta))) if args.beta else np.zeros(10),
        garment_coverage=args.coverage, texture=args.texture,
        n_views=args.views, n_test_views=args.test_views,
        n_guidance_views=args.guidance_views, resolution=args.resolution,
        seed=args.seed or 0, subject=args.subject)
    ds = generate_synthetic(args.out, spec)
    print(f"wrote dataset with {len(ds.views)} train / {len(ds.test_views)} test "
          f"views to {args.out}")
    return 0


def _cmd_stages(args) -> int:
    from . import pipeline
    from .dataset import load_dataset
    from .fileio import (read_face_labels, read_layer, read_mesh,
                         write_face_labels, write_layer, write_mesh)
    cfg = _load_cfg(args).seeded()
    pipeline.set_threads(cfg.threads)
    outdir = Path(args.out)
    if args.command == "run-all":
        summary = pipeline.run_all(args.dataset, cfg, outdir)
        for k, v in summary.items():
            print(f"{k} {v}")
        return 0

    dataset = load_dataset(args.dataset)
    guidance = pipeline.make_guidance_rig(cfg.guidance, dataset, cfg)
    if args.command == "stage1":
        s1 = pipeline.stage1(dataset, cfg.stage1, cfg, guidance, outdir)
        write_layer(outdir / "stage1" / "whole.layer", s1.layer)
        write_mesh(outdir / "stage1" / "whole_mesh.obj", s1.mesh_vertices, s1.mesh_faces)
        write_face_labels(outdir / "stage1" / "whole_mesh.labels", s1.labeled.face_labels)
        write_mesh(outdir / "stage1" / "garment_mesh.obj", s1.garment_vertices,
                   s1.garment_faces)
        write_layer(outdir / "stage1" / "coarse_garment.layer", s1.coarse_garment)
        print(f"stage1 done: {s1.layer.n} surfels, {s1.coarse_garment.n} coarse garment")
        return 0

    s1dir = Path(args.stage1_dir or args.out) / "stage1"
    coarse = read_layer(s1dir / "coarse_garment.layer")
    if args.command == "stage2":
        body, _ = pipeline.stage2(dataset, coarse, cfg.stage2, cfg, guidance, outdir)
        write_layer(outdir / "stage2" / "body.layer", body)
        print(f"stage2 done: {body.n} body surfels")
        return 0

    gv, gf = read_mesh(s1dir / "garment_mesh.obj")
    body_path = Path(args.body) if args.body else outdir / "stage2" / "body.layer"
    body = read_layer(body_path)
    garment, _ = pipeline.stage3(dataset, body, gv, gf, coarse, cfg.stage3, cfg,
                                 guidance, outdir)
    write_layer(outdir / "stage3" / "garment.layer", garment)
    print(f"stage3 done: {garment.n} garment surfels, max scale {garment.s.max():.4f}")
    return 0


def _cmd_mesh(args) -> int:
    from .fileio import read_layer, write_mesh
    from .meshing import marching_cubes, tsdf_fuse
    from .pipeline import _fuse_cameras_for
    from .humanoid import make_test_humanoid
    cfg = _load_cfg(args)
    layers = [read_layer(p) for p in args.layers]
    mu = np.concatenate([l.mu for l in layers])
    lo, hi = mu.min(axis=0), mu.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    from .synthetic import fibonacci_sphere_cameras
    n_cams = args.cameras or cfg.n_fuse_cameras
    cams = fibonacci_sphere_cameras(n_cams, 1.6 * extent, center, 256,
                                    256 * 1.6 / 1.25)
    voxel = args.voxel or cfg.tsdf_voxel
    vol = tsdf_fuse(layers, cams, voxel_size=voxel,
                    truncation=cfg.tsdf_truncation_factor * voxel)
    verts, faces = marching_cubes(vol)
    write_mesh(args.out, verts, faces)
    print(f"wrote mesh with {len(verts)} vertices / {len(faces)} faces to {args.out}")
    return 0


def _cmd_tryon(args) -> int:
    from .fileio import write_image, write_layer, write_mesh
    from .meshing import repose_mesh_lbs, resolve_penetration, tryon_compose
    from .pipeline import load_asset, set_threads
    from .rasterizer import render
    from .skinning import BoneTransforms
    from .synthetic import fibonacci_sphere_cameras
    cfg = _load_cfg(args)
    set_threads(cfg.threads)
    body = load_asset(args.body, cfg.grid_resolution)
    garment = load_asset(args.garment, cfg.grid_resolution)
    theta = np.array([float(v) for v in Path(args.pose).read_text().split()])
    layers = tryon_compose(body, garment, theta, clearance=cfg.clearance)
    outdir = Path(args.out)
    write_layer(outdir / "body_posed.layer", layers[0])
    write_layer(outdir / "garment_posed.layer", layers[1])
    mu = np.concatenate([l.mu for l in layers])
    center = 0.5 * (mu.min(axis=0) + mu.max(axis=0))
    extent = float((mu.max(axis=0) - mu.min(axis=0)).max())
    cams = fibonacci_sphere_cameras(max(args.render_views, 1), 1.7 * extent,
                                    center, 512, 512 * 1.7 / 1.25)
    for i, cam in enumerate(cams[:args.render_views]):
        out, _ = render(layers, cam)
        write_image(outdir / f"render_{i:02d}.png", out.rgb)
    print(f"try-on composition written to {outdir}")
    return 0


def _cmd_render(args) -> int:
    from .core import DEFAULT_SEG_COLORS
    from .fileio import read_camera, read_layer, write_image
    from .rasterizer import render
    layers = [read_layer(p) for p in args.layers]
    camera = read_camera(args.camera)
    if args.mode == "seg":
        out, _ = render(layers, camera, mode="seg", seg_colors=DEFAULT_SEG_COLORS)
        write_image(args.out, out.seg)
    else:
        out, _ = render(layers, camera)
        write_image(args.out, out.rgb)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .fileio import read_image
    from .imageproc import psnr, ssim
    from .report import write_eval_report
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no ground-truth images under {gt_dir}")
    rows = []
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction: {pred_path}")
        a = read_image(pred_path)
        b = read_image(gt_dir / name)
        rows.append({"view": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    write_eval_report(Path(args.out), rows)
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    print(f"mean_psnr {mean_psnr}")
    print(f"mean_ssim {mean_ssim}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            return _cmd_gen_synthetic(args)
        if args.command in ("stage1", "stage2", "stage3", "run-all"):
            return _cmd_stages(args)
        if args.command == "mesh":
            return _cmd_mesh(args)
        if args.command == "tryon":
            return _cmd_tryon(args)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "eval":
            return _cmd_eval(args)
        parser.error(f"unknown command {args.command}")
    except Exception as e:  # noqa: BLE001 - single CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
