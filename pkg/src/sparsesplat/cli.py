"""Command-line interface: gen-scene, train, render, eval, warp-debug, mode-demo."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .errors import SparseSplatError
from .geometry import relative_pose
from .io import (
    config_from_dict,
    load_config,
    load_scene,
    read_float_image,
    save_config,
    write_float_image,
    write_ppm,
)
from .metrics import evaluate
from .modedemo import ModeDemoConfig, run_mode_demo
from .rasterizer import render
from .scene import GaussianCloud, init_synthetic, load_checkpoint, save_checkpoint
from .score import GaussianMixtureOracle, make_schedule
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .trainer import SeenView, TrainConfig, train
from .warp import inverse_warp

PROFILES = {
    "llff": {
        "lambda_l1": 0.8, "lambda_ssim": 0.2, "lambda_depth": 0.5, "lambda_geo": 2.0,
        "lambda_guided": 2.0, "l1_band_mask": False, "opacity_reset_fracs": (0.2,),
    },
    "dtu": {
        "lambda_l1": 0.4, "lambda_ssim": 0.6, "lambda_depth": 0.05, "lambda_geo": 0.2,
        "lambda_guided": 2.0, "l1_band_mask": True,
        "opacity_reset_fracs": tuple(np.round(np.arange(0.2, 1.0, 0.1), 2)),
    },
}


def _heatmap(values: np.ndarray) -> np.ndarray:
    """Simple blue-green-red colormap over normalized values."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    vmax = v[finite].max() if finite.any() else 1.0
    v = np.where(finite, v / max(vmax, 1e-12), 1.0)
    r = np.clip(2 * v - 1, 0, 1)
    g = 1 - np.abs(2 * v - 1)
    b = np.clip(1 - 2 * v, 0, 1)
    return np.stack([r, g, b], axis=-1)


def _build_train_config(args) -> TrainConfig:
    base = TrainConfig()
    if args.profile:
        base = config_from_dict(PROFILES[args.profile], base)
    if getattr(args, "config", None):
        base = load_config(args.config, base)
    overrides = {}
    for item in getattr(args, "set", []) or []:
        key, _, value = item.partition("=")
        if not value:
            raise SparseSplatError(f"--set expects key=value, got {item!r}")
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "total_iters", None) is not None:
        overrides["total_iters"] = args.total_iters
    return config_from_dict(overrides, base)


def _load_views(scene, split: str) -> list[SeenView]:
    out = []
    for name in scene.view_names(split):
        cam, pose = scene.camera(name)
        out.append(SeenView(name, cam, pose, scene.image(name), scene.depth(name)))
    return out


def _build_oracles(scene, config: TrainConfig, prior_mode: str, prior_views: str, cov_scale: float):
    if prior_mode == "none" or scene.gt_cloud is None:
        return None, None, None
    gt = load_checkpoint(scene.root / scene.gt_cloud)
    schedule = make_schedule(
        config.schedule_steps, config.beta_start, config.beta_end,
        t_range=(config.t_range_low, config.t_range_high),
    )
    names = scene.view_names("train") if prior_views == "train" else scene.view_names()
    images = []
    for name in names:
        cam, pose = scene.camera(name)
        images.append(render(gt, cam, pose, np.zeros(3)).color)
    oracle = GaussianMixtureOracle.from_images(images, cov_scale, schedule)

    def pseudo_depth(pose):
        cam, _ = scene.camera(scene.view_names()[0])
        return render(gt, cam, pose, np.zeros(3)).depth

    return oracle, oracle, pseudo_depth


def cmd_gen_scene(args) -> int:
    spec = SyntheticSceneSpec(
        seed=args.seed or 0, n_gaussians=args.gaussians, n_cameras=args.cameras,
        n_train=args.train_views, resolution=args.resolution, noise_level=args.noise,
        arc_degrees=args.arc_degrees, ring_radius=args.ring_radius,
    )
    scene = generate_synthetic(spec, args.out)
    print(f"wrote scene with {len(scene.views)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _build_train_config(args)
    scene = load_scene(args.scene)
    seen = _load_views(scene, "train")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.txt")
    rng = np.random.default_rng(config.seed)
    cloud = init_synthetic(args.init_points, scene.bounds, rng, max_sh_degree=config.max_sh_degree)
    prior, rectified, pseudo_depth = _build_oracles(
        scene, config, args.prior, args.prior_views, args.prior_cov_scale
    )

    def on_checkpoint(iteration, snapshot):
        save_checkpoint(snapshot, out_dir / f"ckpt_{iteration:06d}.ckpt")

    result = train(
        config, cloud, seen, prior=prior, rectified=rectified,
        pseudo_depth_fn=pseudo_depth, bounds=scene.bounds, on_checkpoint=on_checkpoint,
    )
    save_checkpoint(result.cloud, out_dir / "final.ckpt")
    with open(out_dir / "losses.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(result.losses[0].keys()) if result.losses else ["iteration"])
        writer.writeheader()
        writer.writerows(result.losses)

    test_names = scene.view_names("test")
    if test_names:
        views = [(n, *scene.camera(n), scene.image(n)) for n in test_names]
        report = evaluate(result.cloud, views, np.asarray(config.background))
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(report.rows[0].keys()))
            writer.writeheader()
            writer.writerows(report.rows)
        summary = report.summary()
        print(
            f"final: psnr {summary['psnr']:.2f} dB  ssim {summary['ssim']:.4f}  avge2 {summary['avge2']:.4f}"
        )
    print(f"trained {config.total_iters} iterations, {result.cloud.n} gaussians -> {out_dir}")
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cloud = load_checkpoint(args.checkpoint)
    cam, pose = scene.camera(args.view)
    out = render(cloud, cam, pose, np.zeros(3))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(out_dir / f"render_{args.view}.ppm", out.color)
    write_float_image(out_dir / f"render_{args.view}.fimg", out.color)
    write_float_image(out_dir / f"depth_{args.view}.fimg", out.depth)
    print(f"rendered view {args.view} -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    cloud = load_checkpoint(args.checkpoint)
    names = scene.view_names(args.split) or scene.view_names()
    views = [(n, *scene.camera(n), scene.image(n)) for n in names]
    report = evaluate(cloud, views, np.zeros(3))
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(report.rows[0].keys()))
            writer.writeheader()
            writer.writerows(report.rows)
    s = report.summary()
    print(f"views {len(report.rows)}  psnr {s['psnr']:.2f} dB  ssim {s['ssim']:.4f}  avge2 {s['avge2']:.4f}")
    return 0


def cmd_warp_debug(args) -> int:
    scene = load_scene(args.scene)
    cloud = load_checkpoint(args.checkpoint) if args.checkpoint else load_checkpoint(scene.root / scene.gt_cloud)
    cam_i, pose_i = scene.camera(args.src)
    cam_j, pose_j = scene.camera(args.dst)
    src_img = scene.image(args.src)
    depth_i = render(cloud, cam_i, pose_i, np.zeros(3)).depth
    depth_j = render(cloud, cam_j, pose_j, np.zeros(3)).depth
    rel = relative_pose(pose_j, pose_i)
    result = inverse_warp(src_img, depth_i, depth_j, rel, cam_i, args.tau)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(out_dir / "warped.ppm", result.warped_image)
    write_ppm(out_dir / "mask.ppm", result.mask.astype(np.float64))
    diff = np.where(result.mask, np.abs(depth_j - result.warped_depth), np.nan)
    write_ppm(out_dir / "depth_error.ppm", _heatmap(np.nan_to_num(diff, nan=np.nanmax(diff) if result.mask.any() else 1.0)))
    print(f"warp {args.src}->{args.dst}: valid fraction {result.valid_fraction:.3f} -> {out_dir}")
    return 0


def cmd_mode_demo(args) -> int:
    cfg = ModeDemoConfig(
        seed=args.seed or 0, n_seeds=args.seeds, steps=args.steps, lr=args.lr,
        guidance_sds=args.guidance_sds, guidance_guided=args.guidance_guided,
        eta_r=args.eta_r, literal_split_weighting=args.literal_split,
    )
    result = run_mode_demo(cfg, record_every=args.record_every)
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["seed", "method", "step", "dist_target", "dist_failure"])
            for run in result.runs:
                for step, dt, df in run.trajectory:
                    writer.writerow([run.seed, run.method, step, f"{dt:.6f}", f"{df:.6f}"])
                writer.writerow([run.seed, run.method, cfg.steps, f"{run.dist_target:.6f}", f"{run.dist_failure:.6f}"])
    print(
        f"sds reached failure mode in {result.sds_failure_rate:.0%} of seeds; "
        f"rectified reached target in {result.guided_target_rate:.0%}; "
        f"aliasing ratio {result.aliasing_ratio:.4f}"
    )
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsesplat")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic camera-ring scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=20)
    p.add_argument("--cameras", type=int, default=12)
    p.add_argument("--train-views", type=int, default=3)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--arc-degrees", type=float, default=120.0)
    p.add_argument("--ring-radius", type=float, default=4.0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="optimize a cloud against a scene's training views")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--seed", type=int)
    p.add_argument("--total-iters", type=int)
    p.add_argument("--init-points", type=int, default=150)
    p.add_argument("--prior", choices=("mixture", "none"), default="mixture")
    p.add_argument("--prior-views", choices=("all", "train"), default="all")
    p.add_argument("--prior-cov-scale", type=float, default=0.1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one scene view from a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--view", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a view split")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-debug", help="warp one view to another and dump diagnostics")
    p.add_argument("--scene", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp_debug)

    p = sub.add_parser("mode-demo", help="run the mode-seeking basin experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--guidance-sds", type=float, default=5.0)
    p.add_argument("--guidance-guided", type=float, default=7.5)
    p.add_argument("--eta-r", type=float, default=0.1)
    p.add_argument("--literal-split", action="store_true")
    p.add_argument("--record-every", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mode_demo)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SparseSplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
