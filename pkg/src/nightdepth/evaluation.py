"""Depth metrics with median scaling and outlier-honest truncation; trajectory
accumulation and snippet-based absolute trajectory error for ego-motion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .geometry import PoseSE3


@dataclass(frozen=True)
class DepthEvalConfig:
    """Ground truth is filtered at `tau`; predictions are clamped at
    `tau_prime` >= tau so that gross over-predictions are penalised by up to
    tau_prime - tau instead of being silently forgiven."""

    tau: float = 50.0
    tau_prime: float = 100.0
    min_depth_floor: float = 1e-3

    def __post_init__(self):
        if not self.tau_prime >= self.tau > self.min_depth_floor > 0:
            raise ConfigurationError(
                f"need tau_prime >= tau > min_depth_floor > 0, got {self}"
            )


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    d1: float
    d2: float
    d3: float
    n_pixels: int
    n_images: int
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def table(self) -> str:
        header = f"{'Abs Rel':>9} {'Sq Rel':>9} {'RMSE':>9} {'Log RMSE':>9} {'d<1.25':>8} {'d<1.25^2':>9} {'d<1.25^3':>9}"
        row = (f"{self.abs_rel:9.4f} {self.sq_rel:9.4f} {self.rmse:9.4f} {self.log_rmse:9.4f} "
               f"{self.d1:8.4f} {self.d2:9.4f} {self.d3:9.4f}")
        return header + "\n" + row


def median_scale(pred: np.ndarray, gt: np.ndarray):
    """Rescales the prediction so its median matches ground truth's, over the
    valid (gt > 0, finite) pixels.  Returns (scaled prediction, scale)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = (gt > 0) & np.isfinite(gt)
    if not valid.any():
        raise InputError("no valid ground-truth pixels for median scaling")
    scale = float(np.median(gt[valid]) / np.median(pred[valid]))
    return pred * scale, scale


def _single_image_metrics(pred, gt, cfg: DepthEvalConfig):
    valid = (gt > cfg.min_depth_floor) & (gt <= cfg.tau) & np.isfinite(gt)
    if not valid.any():
        return None
    gt_v = gt[valid]
    pred_v = np.clip(pred[valid], cfg.min_depth_floor, cfg.tau_prime)
    thresh = np.maximum(gt_v / pred_v, pred_v / gt_v)
    return {
        "abs_rel": float(np.mean(np.abs(gt_v - pred_v) / gt_v)),
        "sq_rel": float(np.mean((gt_v - pred_v) ** 2 / gt_v)),
        "rmse": float(np.sqrt(np.mean((gt_v - pred_v) ** 2))),
        "log_rmse": float(np.sqrt(np.mean((np.log(gt_v) - np.log(pred_v)) ** 2))),
        "d1": float(np.mean(thresh < 1.25)),
        "d2": float(np.mean(thresh < 1.25 ** 2)),
        "d3": float(np.mean(thresh < 1.25 ** 3)),
        "n_pixels": int(valid.sum()),
    }


def depth_metrics(pred, gt, cfg: DepthEvalConfig = DepthEvalConfig()) -> MetricsReport:
    """Standard seven depth metrics.  Accepts one image pair or two lists of
    images; aggregation is per-image first, then the mean over images.
    Median scaling is the caller's responsibility (see `median_scale`)."""
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    if len(preds) != len(gts):
        raise InputError("need as many predictions as ground-truth images")
    rows, skipped, pixels = [], 0, 0
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise InputError(f"shape mismatch {p.shape} vs {g.shape}")
        row = _single_image_metrics(p, g, cfg)
        if row is None:
            skipped += 1
            continue
        pixels += row.pop("n_pixels")
        rows.append(row)
    if not rows:
        raise InputError("no image had valid ground-truth pixels")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return MetricsReport(**mean, n_pixels=pixels, n_images=len(rows), n_skipped=skipped)


# --------------------------------------------------------------------------
# ego-motion

def trajectory_accumulate(relatives: list) -> list:
    """Left-composes relative camera-motion steps from the identity; returns
    n + 1 global poses for n relatives."""
    poses = [PoseSE3.identity()]
    for rel in relatives:
        poses.append(poses[-1].compose(rel))
    return poses


def trajectory_difference(poses: list) -> list:
    """Inverse of `trajectory_accumulate`."""
    return [a.inverse().compose(b) for a, b in zip(poses, poses[1:])]


@dataclass
class AteReport:
    t_ate_mean: float
    t_ate_std: float
    r_ate_mean: float
    r_ate_std: float
    snippet_len: int
    n_snippets: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def ate(pred_relatives: list, gt_relatives: list, snippet_len: int = 5) -> AteReport:
    """Absolute trajectory error over sliding snippets.

    Each snippet of `snippet_len` relative poses is accumulated from identity;
    the predicted positions get a single least-squares scale onto ground truth
    (monocular scale ambiguity) and per-frame translational errors are taken
    against the composed trajectory (excluding the shared identity frame).
    Rotational errors are the per-frame geodesic angles between corresponding
    RELATIVE rotations, so a constant per-frame yaw offset reads back exactly
    as that offset.  Reported as mean +/- std over all snippets and frames."""
    if len(pred_relatives) != len(gt_relatives):
        raise InputError("trajectories must have equal length")
    if len(pred_relatives) < snippet_len:
        raise InputError(f"need at least {snippet_len} relative poses")
    t_errors, r_errors = [], []
    n_snippets = len(pred_relatives) - snippet_len + 1
    for start in range(n_snippets):
        pred = trajectory_accumulate(pred_relatives[start:start + snippet_len])
        gt = trajectory_accumulate(gt_relatives[start:start + snippet_len])
        pred_pos = np.stack([p.translation for p in pred[1:]])
        gt_pos = np.stack([p.translation for p in gt[1:]])
        denom = float(np.sum(pred_pos ** 2))
        scale = float(np.sum(gt_pos * pred_pos) / denom) if denom > 0 else 1.0
        t_errors.extend(np.linalg.norm(scale * pred_pos - gt_pos, axis=1))
        for p, g in zip(pred_relatives[start:start + snippet_len],
                        gt_relatives[start:start + snippet_len]):
            r_errors.append(PoseSE3(p.rotation @ g.rotation.T, np.zeros(3)).rotation_angle())
    t_errors = np.asarray(t_errors)
    r_errors = np.asarray(r_errors)
    return AteReport(
        t_ate_mean=float(t_errors.mean()),
        t_ate_std=float(t_errors.std()),
        r_ate_mean=float(r_errors.mean()),
        r_ate_std=float(r_errors.std()),
        snippet_len=snippet_len,
        n_snippets=n_snippets,
    )
