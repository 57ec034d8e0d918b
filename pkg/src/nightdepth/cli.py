"""Command-line surface: build-splits, render-synthetic, train, eval-depth,
eval-pose, visualize.

Every command takes a config file and/or flags (flags win) and writes its
outputs plus a provenance record into the requested directory.  Exit codes:
0 success, 1 usage or unreadable config, 2 runtime failure, 3 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from . import __version__
from .datapipe import (Region, build_triplets, frames_from_dataset, geographic_split,
                       keyframe_filter, load_manifest, save_manifest)
from .errors import ConfigurationError, InputError, NumericDivergenceError
from .evaluation import DepthEvalConfig, ate, depth_metrics, median_scale, trajectory_accumulate
from .geometry import PoseSE3
from .imgio import read_image
from .networks import load_checkpoint
from .scenes import PRESETS, build_preset
from .synthetic import load_dataset_manifest, load_scene, render_dataset
from .trainer import TrainConfig, Trainer, TripletDataset

USAGE_EXIT, RUNTIME_EXIT, DIVERGENCE_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; the contract is 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _write_provenance(out_dir: Path, command: str, payload: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "code_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if payload:
        record.update(payload)
    (out_dir / "provenance.json").write_text(json.dumps(record, indent=2))


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands

def cmd_render_synthetic(args) -> int:
    if args.scene:
        scene = load_scene(args.scene)
    else:
        kwargs = {"n_frames": args.frames, "size": args.size, "seed": args.seed}
        if args.noise_sigma is not None:
            kwargs["noise_sigma"] = args.noise_sigma
        scene = build_preset(args.preset, **kwargs)
    manifest = render_dataset(scene, args.out)
    _write_provenance(Path(args.out), "render-synthetic",
                      {"scene": scene.name, "n_frames": manifest["n_frames"]})
    print(f"rendered {manifest['n_frames']} frames of '{scene.name}' to {args.out}")
    return 0


def cmd_build_splits(args) -> int:
    cfg = _load_json(args.config)
    stride = args.stride if args.stride is not None else cfg.get("stride", 1)
    min_sep = cfg.get("min_sep", 0.5)
    regions = [
        Region(name=r["name"],
               x_range=tuple(r["x_range"]) if r.get("x_range") else None,
               y_range=tuple(r["y_range"]) if r.get("y_range") else None,
               z_range=tuple(r["z_range"]) if r.get("z_range") else None)
        for r in cfg["regions"]
    ]
    all_triplets, frames_by_id = [], {}
    for dataset_dir in cfg["datasets"]:
        manifest = load_dataset_manifest(dataset_dir)
        frames = frames_from_dataset(manifest, dataset_dir)
        for f in frames:
            if f.frame_id in frames_by_id:
                raise ConfigurationError(f"duplicate frame id {f.frame_id} across datasets")
            frames_by_id[f.frame_id] = f
        keyframes = keyframe_filter(frames, min_sep)
        all_triplets.extend(build_triplets(keyframes, frames, stride))
    splits = geographic_split(all_triplets, frames_by_id, regions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {
        "datasets": cfg["datasets"], "min_sep": min_sep, "stride": stride,
        "config_sha256": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
    }
    for split in splits:
        split.provenance = provenance
        save_manifest(split, out / f"{split.name}.json")
        print(f"{split.name}: {len(split.triplets)} triplets")
    _write_provenance(out, "build-splits", provenance)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {
        "epochs": args.epochs, "max_steps": args.max_steps, "seed": args.seed,
        "learning_rate": args.learning_rate, "batch_size": args.batch_size,
        "stride": args.stride, "lighting_mode": args.lighting_mode,
    }
    data = config.to_dict()
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    for toggle in ("use_nit", "use_residual_flow", "use_denoise"):
        flag = getattr(args, toggle)
        if flag is not None:
            data[toggle] = flag == "on"
    config = TrainConfig.from_dict(data)
    trainer = Trainer(config, args.dataset, args.train_manifest,
                      val_manifest=args.val_manifest, run_dir=args.run_dir)
    summary = trainer.train()
    print(f"trained {summary['steps']} steps; best val {summary['best_val']:.6f} "
          f"(epoch {summary['best_epoch']})")
    return 0


def _load_nets(checkpoint):
    depth_net, motion_net, extra = load_checkpoint(checkpoint)
    depth_net.eval()
    motion_net.eval()
    return depth_net, motion_net, extra


def cmd_eval_depth(args) -> int:
    depth_net, _, _ = _load_nets(args.checkpoint)
    data = TripletDataset(args.dataset, args.manifest)
    cfg = DepthEvalConfig(tau=args.tau, tau_prime=args.tau_prime)
    preds, gts = [], []
    for i in range(len(data)):
        sample = data[i]
        with torch.no_grad():
            pred = depth_net(sample["center"])[0].numpy()
        gt = data.gt_arrays(sample["ids"][1])["depth"]
        scaled, _ = median_scale(pred, gt)
        preds.append(scaled)
        gts.append(gt)
    report = depth_metrics(preds, gts, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "depth_metrics.json")
    _write_provenance(out, "eval-depth", {"checkpoint": str(args.checkpoint),
                                          "tau": cfg.tau, "tau_prime": cfg.tau_prime})
    print(report.table())
    return 0


def _dataset_relative_poses(dataset_dir, motion_net):
    """Predicted and ground-truth camera-motion steps over the full sequence."""
    manifest = load_dataset_manifest(dataset_dir)
    root = Path(dataset_dir)
    frames = sorted(manifest["frames"], key=lambda f: f["index"])
    pred_rel, gt_rel = [], []
    for a, b in zip(frames, frames[1:]):
        img_a = torch.from_numpy(read_image(root / a["image"]))
        img_b = torch.from_numpy(read_image(root / b["image"]))
        with torch.no_grad():
            _, pose = motion_net((img_a, img_b))
        pred_rel.append(pose.to_pose().inverse())  # point transform -> camera motion
        with np.load(root / a["gt"]) as gt:
            gt_rel.append(PoseSE3.from_matrix(np.array(gt["pose_next"])).inverse())
    return pred_rel, gt_rel


def _plot_trajectories(pred_rel, gt_rel, path):
    pred = np.stack([p.translation for p in trajectory_accumulate(pred_rel)])
    gt = np.stack([p.translation for p in trajectory_accumulate(gt_rel)])
    denom = float(np.sum(pred ** 2))
    scale = float(np.sum(gt * pred) / denom) if denom > 0 else 1.0
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 2], label="ground truth")
    ax.plot(scale * pred[:, 0], scale * pred[:, 2], "--", label="estimated (scale aligned)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("z (m)")
    ax.legend()
    ax.set_title("trajectory (top-down)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval_pose(args) -> int:
    _, motion_net, _ = _load_nets(args.checkpoint)
    pred_rel, gt_rel = _dataset_relative_poses(args.dataset, motion_net)
    report = ate(pred_rel, gt_rel, snippet_len=args.snippet_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "ate.json")
    _plot_trajectories(pred_rel, gt_rel, out / "trajectory.png")
    _write_provenance(out, "eval-pose", {"checkpoint": str(args.checkpoint)})
    print(f"t_ate = {report.t_ate_mean:.5f} +/- {report.t_ate_std:.5f} m ; "
          f"r_ate = {report.r_ate_mean:.5f} +/- {report.r_ate_std:.5f} rad "
          f"({report.n_snippets} snippets)")
    return 0


def _plot_loss_log(run_dir: Path, out: Path):
    records = [json.loads(line) for line in (run_dir / "loss_log.jsonl").read_text().splitlines()]
    steps = [r["step"] for r in records if "total" in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in ("total", "photometric", "sparsity", "smoothness"):
        ax.plot(steps, [r[term] for r in records if "total" in r], label=term)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)


def cmd_visualize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.run_dir:
        _plot_loss_log(Path(args.run_dir), out)
        made.append("loss_curves.png")
    if args.checkpoint:
        if not (args.dataset and args.manifest):
            raise ConfigurationError("--checkpoint needs --dataset and --manifest")
        depth_net, motion_net, _ = _load_nets(args.checkpoint)
        data = TripletDataset(args.dataset, args.manifest)
        sample = data[args.index]
        with torch.no_grad():
            depth = depth_net(sample["center"])[0].numpy()
            feats, _ = motion_net((sample["center"], sample["next"]))
            plt.imsave(out / "image.png", sample["center"].numpy())
            plt.imsave(out / "depth.png", 1.0 / depth, cmap="magma")
            made += ["image.png", "depth.png"]
            if motion_net.lighting_decoder is not None:
                lc = motion_net.decode_lighting(feats, depth.shape)
                plt.imsave(out / "contrast.png", lc.contrast.numpy()[..., 0], cmap="coolwarm")
                plt.imsave(out / "brightness.png", lc.brightness.numpy()[..., 0], cmap="coolwarm")
                made += ["contrast.png", "brightness.png"]
            if motion_net.residual_decoder is not None:
                pyr = motion_net.decode_residual_flow(feats)
                magnitude = np.linalg.norm(pyr.full_resolution.numpy(), axis=-1)
                plt.imsave(out / "residual_magnitude.png", magnitude, cmap="viridis")
                made.append("residual_magnitude.png")
    if not made:
        raise ConfigurationError("nothing to visualize: pass --run-dir and/or --checkpoint")
    _write_provenance(out, "visualize", {"outputs": made})
    print(f"wrote {', '.join(made)} to {out}")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="nightdepth", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-synthetic", help="render a synthetic dataset with ground truth")
    p.add_argument("--preset", choices=sorted(PRESETS), default="corridor")
    p.add_argument("--scene", help="scene spec JSON (overrides --preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(fn=cmd_render_synthetic)

    p = sub.add_parser("build-splits", help="keyframe, triplet and geographic split construction")
    p.add_argument("--config", required=True, help="JSON naming datasets, min_sep, stride, regions")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(fn=cmd_build_splits)

    p = sub.add_parser("train", help="train depth and motion networks")
    p.add_argument("--config", help="TrainConfig JSON; flags override its fields")
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--lighting-mode", choices=["scale_only", "scale_shift"])
    for toggle in ("use-nit", "use-residual-flow", "use-denoise"):
        p.add_argument(f"--{toggle}", choices=["on", "off"], dest=toggle.replace("-", "_"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-depth", help="depth metrics with median scaling and truncation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=50.0)
    p.add_argument("--tau-prime", type=float, default=100.0)
    p.set_defaults(fn=cmd_eval_depth)

    p = sub.add_parser("eval-pose", help="snippet ATE over the dataset sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snippet-len", type=int, default=5)
    p.set_defaults(fn=cmd_eval_pose)

    p = sub.add_parser("visualize", help="depth/lighting/residual maps and loss curves")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--manifest")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--run-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_EXIT
    try:
        return args.fn(args)
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return DIVERGENCE_EXIT
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (InputError, OSError, RuntimeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
