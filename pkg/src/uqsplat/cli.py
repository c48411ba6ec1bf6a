"""Command line interface.

The subcommands chain into the usual pipeline:

    uqsplat synth --preset plane_sphere --out data/ps
    uqsplat train --scene data/ps --out runs/ps --iterations 3000
    uqsplat render --scene data/ps --checkpoint runs/ps/gaussians_003000.ply --out renders
    uqsplat mesh --scene data/ps --checkpoint runs/ps/gaussians_003000.ply --out runs/ps/mesh.ply
    uqsplat eval --scene data/ps --checkpoint runs/ps/gaussians_003000.ply --views holdout
    uqsplat gradcheck --term all --out report.json

--scene accepts a scene.json path, a directory containing one, or a COLMAP
text model directory (cameras.txt/images.txt/points3D.txt; pass --images for
the image files). Every subcommand prints a one-line JSON summary to stdout.

Exit codes: 0 success, 1 runtime failure (divergence, gradcheck over
tolerance), 2 bad arguments or configuration, 3 unreadable or malformed data.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import imgio, synthetic
from .colmap import ColmapError, load_colmap
from .gradients import ALL_TERMS, gradcheck
from .meshing import TsdfVolume, chamfer_and_f1, extract_mesh, fuse_renders
from .rasterizer import CmfKind, RenderConfig, render
from .scene import Camera, GaussianSet
from .trainer import DivergenceError, TrainConfig, train
from .utils import SH_C0, inv_sigmoid, quat_normalize, stable_json

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(Exception):
    """Arguments that parse but do not make sense together."""


class DataError(Exception):
    """Input files that are missing, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# shared argument plumbing

_SCALAR_TYPES = {"int": int, "int | None": int, "float": float, "str": str}


def _add_train_flags(parser):
    """One flag per TrainConfig field; unset flags keep the dataclass default."""
    g = parser.add_argument_group("training configuration")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "background":
            g.add_argument(flag, metavar="R,G,B", help="background color (default 0,0,0)")
        else:
            g.add_argument(
                flag,
                type=_SCALAR_TYPES[f.type],
                metavar=f.type.split(" ")[0].upper(),
                help=f"default {f.default}",
            )


def _train_config(args) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        if f.name == "background":
            v = _parse_rgb(v)
        kw[f.name] = v
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _parse_rgb(text: str) -> tuple:
    parts = text.split(",")
    try:
        rgb = tuple(float(p) for p in parts)
    except ValueError:
        rgb = ()
    if len(rgb) != 3:
        raise ConfigError(f"expected three comma separated numbers, got {text!r}")
    return rgb


def _render_config(args) -> RenderConfig:
    try:
        kind = CmfKind(getattr(args, "cmf", None) or "quadratic")
    except ValueError as e:
        raise ConfigError(str(e)) from e
    bg = (0.0, 0.0, 0.0)
    if getattr(args, "background", None):
        bg = _parse_rgb(args.background)
    return RenderConfig(cmf=kind, background=bg)


def _load_dataset(scene_arg, images_dir=None, load_gt: bool = True) -> synthetic.LoadedScene:
    """scene.json path, a directory holding one, or a COLMAP text model dir."""
    path = Path(scene_arg)
    try:
        if path.is_dir():
            if (path / "cameras.txt").exists():
                sc = load_colmap(path, images_dir=images_dir)
                n = len(sc.cameras)
                return synthetic.LoadedScene(
                    cameras=sc.cameras,
                    images=sc.images or [],
                    train=list(range(n)),
                    holdout=[],
                    gaussians=sc.gaussians,
                )
            path = path / "scene.json"
        return synthetic.load_scene(path, load_gt=load_gt)
    except (ColmapError, ValueError, OSError) as e:
        raise DataError(str(e)) from e


def _load_checkpoint(path) -> GaussianSet:
    try:
        return GaussianSet.load_ply(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


def _gaussians_for(args, ls: synthetic.LoadedScene) -> GaussianSet:
    if getattr(args, "checkpoint", None):
        return _load_checkpoint(args.checkpoint)
    return ls.gaussians


def _pick_views(token: str, ls: synthetic.LoadedScene) -> list:
    """'all' | 'train' | 'holdout' | comma separated indices."""
    n = len(ls.cameras)
    if token == "all":
        return list(range(n))
    if token == "train":
        return list(ls.train)
    if token == "holdout":
        if not ls.holdout:
            raise DataError("dataset has no holdout views")
        return list(ls.holdout)
    try:
        idx = [int(t) for t in token.split(",") if t]
    except ValueError:
        idx = []
    if not idx:
        raise ConfigError(f"bad --views value {token!r}")
    for i in idx:
        if not 0 <= i < n:
            raise DataError(f"view {i} out of range [0, {n})")
    return idx


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(doc: dict) -> int:
    print(stable_json(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    overrides = {}
    if args.views is not None:
        overrides["n_views"] = args.views
    if args.size is not None:
        overrides["width"] = overrides["height"] = args.size
    if args.focal is not None:
        overrides["focal"] = args.focal
    if args.holdout is not None:
        if args.holdout.lower() in ("none", ""):
            overrides["holdout"] = ()
        else:
            try:
                overrides["holdout"] = tuple(int(t) for t in args.holdout.split(","))
            except ValueError as e:
                raise ConfigError(f"bad --holdout value {args.holdout!r}") from e
    try:
        spec = synthetic.preset(args.preset.replace("-", "_"), seed=args.seed, **overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    ss = synthetic.SyntheticScene.generate(spec)
    path = synthetic.write_scene(ss, args.out)
    return _emit(
        {
            "scene": str(path),
            "kind": spec.kind,
            "views": spec.n_views,
            "size": [spec.width, spec.height],
            "train": ss.train_indices(),
            "holdout": list(spec.holdout),
        }
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ls = _load_dataset(args.scene, images_dir=args.images, load_gt=False)
    scene = ls.train_scene()
    if args.init is not None:
        scene.gaussians = _load_checkpoint(args.init)
    out = Path(args.out)
    try:
        scene, rows = train(scene, cfg, out_dir=out, log_path=out / "log.jsonl")
    except ValueError as e:
        raise DataError(str(e)) from e
    ckpt = out / f"gaussians_{cfg.iterations:06d}.ply"
    state = out / f"state_{cfg.iterations:06d}.json"
    summary = {
        "out": str(out),
        "checkpoint": str(ckpt),
        "state": str(state),
        "log": str(out / "log.jsonl"),
        "iterations": cfg.iterations,
        "n_gaussians": len(scene.gaussians),
        "final_total": rows[-1]["total"] if rows else None,
    }
    if args.deterministic:
        summary["sha256"] = {
            "checkpoint": _sha256(ckpt),
            "state": _sha256(state),
            "log": _sha256(out / "log.jsonl"),
        }
    return _emit(summary)


def cmd_render(args) -> int:
    ls = _load_dataset(args.scene, load_gt=False)
    g = _gaussians_for(args, ls)
    cfg = _render_config(args)
    views = _pick_views(args.views, ls)
    out = Path(args.out)
    for i in views:
        r = render(g, ls.cameras[i], cfg, record=False)
        imgio.save_render_maps(out, f"view_{i:03d}", r, depth_scale=args.depth_scale)
    return _emit({"out": str(out), "views": views, "n_gaussians": len(g)})


def cmd_mesh(args) -> int:
    ls = _load_dataset(args.scene, load_gt=True)
    g = _gaussians_for(args, ls)
    cfg = _render_config(args)
    views = _pick_views(args.views, ls)
    renders = [render(g, ls.cameras[i], cfg, record=False) for i in views]
    if ls.spec is not None:
        lo, hi = synthetic.scene_bbox(ls.spec)
    else:
        m = g.means
        pad = 0.1 * max(float(np.max(m.max(0) - m.min(0))), 1e-3)
        lo, hi = m.min(0) - pad, m.max(0) + pad
    try:
        vol = TsdfVolume.from_bbox(lo, hi, resolution=args.resolution, tau_voxels=args.tau_voxels)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    fuse_renders(vol, renders, [ls.cameras[i] for i in views], use_unbiased=args.unbiased_depth)
    mesh = extract_mesh(vol, min_weight=args.min_weight)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".obj":
        mesh.save_obj(out)
    else:
        mesh.save_ply(out)
    stats = {
        "mesh": str(out),
        "vertices": len(mesh.vertices),
        "faces": len(mesh.faces),
        "voxel_size": vol.voxel_size,
    }
    if ls.spec is not None and ls.gt_depths is not None and len(mesh.faces):
        gt = synthetic.observed_surface_points(ls.as_synthetic(), views, n=60_000, seed=0)
        res = chamfer_and_f1(mesh, gt, threshold=vol.voxel_size)
        stats.update(chamfer=res["chamfer"], f1=res["f1"], f1_threshold=res["threshold"])
    return _emit(stats)


def cmd_eval(args) -> int:
    ls = _load_dataset(args.scene, load_gt=True)
    g = _gaussians_for(args, ls)
    cfg = _render_config(args)
    views = _pick_views(args.views, ls)
    per = []
    for i in views:
        r = render(g, ls.cameras[i], cfg, record=False)
        p, s = imgio.psnr_ssim(r.color, ls.images[i])
        row = {"view": i, "psnr": p, "ssim": s}
        if ls.gt_depths is not None:
            mask = ls.gt_vis[i] & r.valid
            row["depth_mae"] = synthetic.depth_mae(r.depth, ls.gt_depths[i], mask)
        per.append(row)
    doc = {
        "views": per,
        "mean_psnr": float(np.mean([r["psnr"] for r in per])),
        "mean_ssim": float(np.mean([r["ssim"] for r in per])),
    }
    if all("depth_mae" in r for r in per):
        doc["mean_depth_mae"] = float(np.mean([r["depth_mae"] for r in per]))
    return _emit(doc)


def _backdrop(mean, scale, opacity, u, color=(0.8, 0.2, 0.2), thin=1e-3):
    """One large planar Gaussian with its normal along +z."""
    rgb = np.asarray(color, dtype=np.float64)
    return GaussianSet(
        means=np.asarray(mean, dtype=np.float64).reshape(1, 3),
        quats=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log([[scale, scale, thin]]),
        opacity_logits=[float(inv_sigmoid(opacity))],
        colors_dc=((rgb - 0.5) / SH_C0).reshape(1, 3),
        uncertainty_logits=[float(inv_sigmoid(u))],
    )


def _gradcheck_micro(n=10, size=8, seed=0):
    """Jittered Gaussians over a backdrop plane, two views, rendered targets.

    Targets come from a perturbed copy of the scene: close enough to keep the
    SSIM exposure gate open, far enough (with the biased exposure offsets)
    that every L1 residual stays one-signed under the FD probes.
    """
    rng = np.random.default_rng(seed)
    m = n - 1
    rgb = rng.uniform(0.05, 0.95, size=(m, 3))
    g = GaussianSet(
        means=np.column_stack(
            [rng.uniform(-0.6, 0.6, m), rng.uniform(-0.6, 0.6, m), rng.uniform(2.0, 4.0, m)]
        ),
        quats=quat_normalize(rng.normal(size=(m, 4))),
        log_scales=rng.uniform(np.log(0.15), np.log(0.5), (m, 3)),
        opacity_logits=inv_sigmoid(rng.uniform(0.25, 0.8, m)),
        colors_dc=(rgb - 0.5) / SH_C0,
        uncertainty_logits=inv_sigmoid(rng.uniform(0.25, 0.75, m)),
    )
    g = GaussianSet.concatenate([g, _backdrop((0.0, 0.0, 6.0), 6.0, 0.9, 0.4)])
    K = np.array([[10.0, 0, size / 2], [0, 10.0, size / 2], [0, 0, 1.0]])
    cams = [
        Camera(K=K, R=np.eye(3), t=np.zeros(3), width=size, height=size),
        Camera.look_at((0.5, 0.25, -0.2), (0.0, 0.0, 3.0), (0.0, -1.0, 0.0), K, size, size),
    ]
    pert = g.copy()
    pert.means = pert.means + rng.normal(0, 0.01, pert.means.shape)
    pert.colors_dc = pert.colors_dc + rng.normal(0, 0.02, pert.colors_dc.shape)
    cfg = RenderConfig.for_gradcheck()
    images = [render(pert, c, cfg, record=False).color for c in cams]
    exposure = np.array([[0.05, -0.12], [0.03, -0.1]])
    return g, cams, images, exposure


def _gradcheck_plane(size=32, seed=1):
    """A rough textured plane at z=2, large enough for the NCC patch grid."""
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.linspace(-0.9, 0.9, 4), np.linspace(-0.9, 0.9, 4))
    n = xs.size
    rgb = rng.uniform(0.2, 0.8, (n, 3))
    g = GaussianSet(
        means=np.column_stack([xs.ravel(), ys.ravel(), 2.0 + rng.normal(0, 0.02, n)]),
        quats=quat_normalize(np.column_stack([np.ones(n), rng.normal(0, 0.05, (n, 3))])),
        log_scales=np.tile(np.log([0.45, 0.45, 2e-3]), (n, 1)),
        opacity_logits=np.full(n, float(inv_sigmoid(0.85))),
        colors_dc=(rgb - 0.5) / SH_C0,
        uncertainty_logits=inv_sigmoid(rng.uniform(0.3, 0.7, n)),
    )
    g = GaussianSet.concatenate([g, _backdrop((0.0, 0.0, 4.0), 10.0, 0.9, 0.5)])
    K = np.array([[40.0, 0, size / 2], [0, 40.0, size / 2], [0, 0, 1.0]])
    cams = [
        Camera(K=K, R=np.eye(3), t=np.zeros(3), width=size, height=size),
        Camera.look_at((0.3, 0.15, 0.0), (0.0, 0.0, 2.0), (0.0, -1.0, 0.0), K, size, size),
    ]
    pert = g.copy()
    pert.colors_dc = pert.colors_dc + rng.normal(0, 0.08, pert.colors_dc.shape)
    cfg = RenderConfig.for_gradcheck()
    images = [render(pert, c, cfg, record=False).color for c in cams]
    return g, cams, images


def cmd_gradcheck(args) -> int:
    if args.term != "all" and args.term not in ALL_TERMS:
        raise ConfigError(f"unknown term {args.term!r}; have all, {', '.join(sorted(ALL_TERMS))}")
    checks = {}
    # rgb/scale/nll (and the combined loss) on the micro scene; the multi-view
    # terms need the larger textured plane for their patch grid to be nonempty.
    if args.term in ("all", "rgb", "scale", "nll"):
        g, cams, images, exposure = _gradcheck_micro(n=args.gaussians, size=args.size, seed=args.seed)
        terms = None if args.term == "all" else frozenset({args.term})
        checks["micro"] = gradcheck(
            g, cams, images, cam_i=0, nbr_i=1, stage=3, exposure=exposure,
            terms=terms, h=args.h, tol=args.tol, max_coords=args.max_coords,
            seed=args.seed,
        )
    if args.term in ("all", "ncc", "geo"):
        # The warped patch samples are bilinear, so the loss is only C0 across
        # pixel boundaries; the scene/subsample seed pairs keep the probed
        # coordinates away from those kinks.
        mv_coords = min(args.max_coords, 40) if args.max_coords else 40
        seeds = {"ncc": (args.seed + 1, args.seed + 3), "geo": (args.seed + 2, args.seed + 4)}
        for term in ("ncc", "geo") if args.term == "all" else (args.term,):
            scene_seed, pick_seed = seeds[term]
            g, cams, images = _gradcheck_plane(seed=scene_seed)
            checks[f"plane_{term}"] = gradcheck(
                g, cams, images, cam_i=0, nbr_i=1, stage=2,
                terms=frozenset({term}), h=args.h, tol=args.tol,
                max_coords=mv_coords, seed=pick_seed,
            )
    report = {
        "passed": all(c["passed"] for c in checks.values()),
        "max_rel_err": max(c["max_rel_err"] for c in checks.values()),
        "tolerance": args.tol,
        "h": args.h,
        "term": args.term,
        "checks": checks,
    }
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(stable_json(report))
        report = dict(report, report_path=str(out))
    print(stable_json(report))
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqsplat",
        description="Uncertainty-aware planar Gaussian splatting on the CPU.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--preset", default="plane_sphere",
                   help="plane | sphere | plane_sphere (default)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, help="override number of ring views")
    p.add_argument("--size", type=int, help="image width and height")
    p.add_argument("--focal", type=float, help="focal length in pixels")
    p.add_argument("--holdout", help="comma separated held-out view ids, or 'none'")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a scene")
    p.add_argument("--scene", required=True, help="dataset (scene.json or COLMAP dir)")
    p.add_argument("--images", help="image directory for COLMAP models")
    p.add_argument("--init", help="initial Gaussians PLY (default: dataset init)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and log")
    p.add_argument("--deterministic", action="store_true",
                   help="record output hashes; all RNG streams are seeded")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="write color/depth/normal/uncertainty maps")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", help="Gaussians PLY (default: dataset init)")
    p.add_argument("--out", required=True)
    p.add_argument("--views", default="all", help="all | train | holdout | i,j,...")
    p.add_argument("--cmf", default="quadratic")
    p.add_argument("--background", metavar="R,G,B")
    p.add_argument("--depth-scale", type=float,
                   help="also write 16-bit depth PNGs at this scale")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="TSDF-fuse rendered depth and extract a mesh")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", help="Gaussians PLY (default: dataset init)")
    p.add_argument("--out", required=True, help="mesh path (.ply or .obj)")
    p.add_argument("--views", default="train", help="all | train | holdout | i,j,...")
    p.add_argument("--cmf", default="quadratic")
    p.add_argument("--resolution", type=int, default=128, help="voxels on the longest edge")
    p.add_argument("--tau-voxels", type=float, default=4.0, help="truncation in voxels")
    p.add_argument("--min-weight", type=float, default=1.0,
                   help="march only voxels fused at least this often")
    p.add_argument("--unbiased-depth", action="store_true",
                   help="fuse the unbiased depth D instead of the CMF-weighted D_u")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="PSNR/SSIM and depth MAE against a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", help="Gaussians PLY (default: dataset init)")
    p.add_argument("--views", default="holdout", help="all | train | holdout | i,j,...")
    p.add_argument("--cmf", default="quadratic")
    p.add_argument("--background", metavar="R,G,B")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on a seeded micro scene")
    p.add_argument("--term", default="all",
                   help="all | " + " | ".join(sorted(ALL_TERMS)))
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8, help="micro scene image size")
    p.add_argument("--gaussians", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-4, help="central difference step")
    p.add_argument("--tol", type=float, default=1e-3, help="max relative error")
    p.add_argument("--max-coords", type=int, default=120,
                   help="subsample this many coordinates")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
