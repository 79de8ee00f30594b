"""Command-line entry point.

Subcommands: bake, extract-surface, decompose, render, relight,
edit-material.  Exit codes: 0 success, 1 usage error, 2 runtime error (with
a diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .errors import RefieldError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="refield",
                description="decompose a density volume into surfel "
                            "reflectance plus environment lighting")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP worker threads")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file (defaults applied otherwise)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bake", parents=[], help="bake a scene to a fixture")
    b.add_argument("--scene", required=True)
    b.add_argument("--dims", type=int, default=64)
    b.add_argument("--out", required=True)
    b.add_argument("--views", type=int, default=16)
    b.add_argument("--resolution", type=int, default=64)
    b.add_argument("--samples", type=int, default=768)

    e = sub.add_parser("extract-surface", help="extract surfels from a grid")
    e.add_argument("--grid", required=True)
    e.add_argument("--cameras", required=True)
    e.add_argument("--out", required=True)

    d = sub.add_parser("decompose", help="run the staged decomposition")
    d.add_argument("--grid", required=True)
    d.add_argument("--views", required=True,
                   help="directory with view_*.pfm, cameras.json, masks")
    d.add_argument("--out", required=True)

    r = sub.add_parser("render", help="render a decomposition")
    _render_args(r)

    rl = sub.add_parser("relight", help="render under substituted lighting")
    _render_args(rl)

    em = sub.add_parser("edit-material", help="render with edited materials")
    _render_args(em)
    em.add_argument("--scale-albedo", type=str, default=None,
                    help="r,g,b multipliers")
    em.add_argument("--set-roughness", type=float, default=None)
    em.add_argument("--set-albedo", type=str, default=None, help="r,g,b")
    return p


def _render_args(sp):
    sp.add_argument("--surfels", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--env", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--view-index", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--png", default=None)
    sp.add_argument("--exposure", type=float, default=1.0)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = Config.load(args.config) if args.config else Config()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if cfg.threads > 0:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(cfg.threads)
        handler = {
            "bake": _cmd_bake,
            "extract-surface": _cmd_extract,
            "decompose": _cmd_decompose,
            "render": _cmd_render,
            "relight": _cmd_render,
            "edit-material": _cmd_render,
        }[args.command]
        handler(args, cfg)
        return 0
    except (RefieldError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _cmd_bake(args, cfg: Config) -> None:
    from . import scenes
    from .envmap import save_env_cross
    from .grids import save_rfv
    from .pfm import save_pfm
    from .render import save_cameras

    desc = scenes.load_scene(args.scene)
    out = Path(args.out)
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)

    grid = scenes.bake_scene(desc, args.dims)
    save_rfv(out / "grid.rfv", grid)

    cams = scenes.ring_cameras(args.views, resolution=args.resolution)
    save_cameras(out / "cameras.json", cams)
    env = desc.gt_env()
    save_env_cross(out / "gt" / "env.pfm", env)

    for i, cam in enumerate(cams):
        img, hit = scenes.render_reference(desc, cam, args.samples,
                                           seed=cfg.seed, env=env)
        save_pfm(out / "views" / f"view_{i:03d}.pfm", img)
        save_pfm(out / "gt" / f"mask_{i:03d}.pfm",
                 hit.astype(np.float32))
        origins, dirs = cam.rays()
        t, _, h = scenes.intersect(desc, origins, dirs)
        x = origins + t[:, None] * dirs
        x[~h] = 0.0
        alb = desc.gt_albedo(x)
        nrm = desc.gt_normal(x)
        alb[~h] = 0.0
        nrm[~h] = 0.0
        res = (cam.height, cam.width, 3)
        save_pfm(out / "gt" / f"albedo_{i:03d}.pfm",
                 alb.reshape(res).astype(np.float32))
        save_pfm(out / "gt" / f"normal_{i:03d}.pfm",
                 (0.5 * nrm + 0.5).reshape(res).astype(np.float32))
    print(f"baked {args.views} views into {out}")


def _load_views(views_dir):
    from .pfm import load_pfm
    from .render import load_cameras

    views_dir = Path(views_dir)
    cam_file = views_dir / "cameras.json"
    if not cam_file.exists():
        cam_file = views_dir.parent / "cameras.json"
    cams = load_cameras(cam_file)
    pfms = sorted((views_dir / "views").glob("view_*.pfm")) \
        if (views_dir / "views").is_dir() else sorted(views_dir.glob("view_*.pfm"))
    images = [load_pfm(p) for p in pfms]
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} views but {len(cams)} cameras")
    masks = []
    gt_dir = views_dir / "gt" if (views_dir / "gt").is_dir() \
        else views_dir.parent / "gt"
    for i in range(len(images)):
        mp = gt_dir / f"mask_{i:03d}.pfm"
        masks.append(load_pfm(mp) if mp.exists() else None)
    if any(m is None for m in masks):
        masks = None
    return cams, images, masks


def _cmd_extract(args, cfg: Config) -> None:
    from .decompose import extract_training_surfels
    from .grids import load_rfv
    from .octree import build_octree
    from .render import load_cameras
    from .surfels import save_sfl

    grid = load_rfv(args.grid)
    cams = load_cameras(args.cameras)
    tree = build_octree(grid, cfg.octree_max_depth, cfg.octree_leaf_brick)
    images = [np.zeros((c.height, c.width, 3), dtype=np.float32)
              for c in cams]
    data = extract_training_surfels(grid, tree, cams, images,
                                    config=cfg.render_config())
    save_sfl(args.out, data.cloud)
    print(f"extracted {len(data.cloud)} surfels -> {args.out}")


def _cmd_decompose(args, cfg: Config) -> None:
    from .decompose import metrics_to_csv, run_decomposition
    from .envmap import save_env_cross
    from .grids import load_rfv
    from .surfels import save_sfl

    grid = load_rfv(args.grid)
    cams, images, masks = _load_views(args.views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cloud, env, metrics, _ = run_decomposition(
        grid, images, cams,
        schedule=cfg.schedule(), weights=cfg.loss_weights(),
        config=cfg.render_config(), seed=cfg.seed, masks=masks,
        env_resolution=cfg.env_resolution, gkd_params=cfg.gkd_params(),
        smooth_attrs=tuple(cfg.smooth_attrs), smooth_norm=cfg.smooth_norm,
        log_fn=lambda m: print(
            f"epoch {m.epoch:4d} [{m.stage}] total={m.total:.5f} "
            f"R={m.render:.5f} PSNR={m.psnr:.2f}", file=sys.stderr))
    save_sfl(out / "surfels.sfl", cloud)
    save_env_cross(out / "env.pfm", env)
    with open(out / "metrics.csv", "w") as f:
        f.write(metrics_to_csv(metrics))
    cfg.save(out / "config.json")
    print(f"decomposition written to {out}")


def _cmd_render(args, cfg: Config) -> None:
    from .envmap import load_env_cross
    from .grids import load_rfv
    from .octree import build_octree
    from .pfm import save_pfm
    from .preview import save_png, tonemap
    from .render import load_cameras, render_image
    from .surfels import load_sfl

    grid = load_rfv(args.grid)
    cloud = load_sfl(args.surfels)
    env = load_env_cross(args.env)
    cams = load_cameras(args.camera)
    cam = cams[args.view_index]
    tree = build_octree(grid, cfg.octree_max_depth, cfg.octree_leaf_brick)

    if getattr(args, "scale_albedo", None):
        s = np.asarray([float(x) for x in args.scale_albedo.split(",")])
        cloud.set_albedo(np.clip(cloud.albedo * s, 0, 1))
    if getattr(args, "set_albedo", None):
        v = np.asarray([float(x) for x in args.set_albedo.split(",")])
        cloud.set_albedo(np.broadcast_to(v, cloud.albedo.shape).copy())
    if getattr(args, "set_roughness", None) is not None:
        cloud.set_roughness(np.full(len(cloud), args.set_roughness))

    img, alpha = render_image(cam, grid, tree, cloud, env,
                              cfg.render_config())
    save_pfm(args.out, img.astype(np.float32))
    if args.png:
        save_png(args.png, tonemap(img, args.exposure))
    print(f"rendered {args.out}")


if __name__ == "__main__":
    sys.exit(main())
