"""Training loop: bidirectional warped-minimum photometric loss with optional
per-pixel lighting compensation, residual-flow-corrected correspondences and
training-time denoising of the loss targets.

Per step and per direction (t -> t+1 and t -> t-1):

    depth scales   = DepthNet(I_t)
    features, pose = MotionNet([I_t, I_other])
    residual flows = residual decoder(features)          (toggle)
    contrast/shift = lighting decoder(features)          (toggle)
    targets        = denoise(I_t), denoise(I_other)      (toggle; loss path only)
    recon          = reconstruct(targets_other, V + R)
    compensated    = contrast * recon + shift
    map            = photometric(targets_t, compensated)

then the per-pixel minimum over the four maps (both directions' warped and
unwarped "auto-mask" maps), averaged over scales, plus the weighted sparsity
and smoothness terms.  The networks always consume the ORIGINAL images;
denoising touches loss targets only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .datapipe import SplitManifest, load_manifest
from .denoise import Denoiser, DenoiserSpec, build_denoiser
from .errors import ConfigurationError, NumericDivergenceError
from .geometry import Intrinsics, reconstruct, reproject
from .imgio import read_image
from .networks import (DepthNet, DepthNetConfig, MotionNet, MotionNetConfig,
                       save_checkpoint)
from .synthetic import load_dataset_manifest


@dataclass
class TrainConfig:
    epochs: int = 15
    max_steps: int | None = None
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    lambda_r: float = 1e-3
    lambda_g: float = 1e-3
    alpha: float = 0.85
    batch_size: int = 4
    seed: int = 0
    encoder_width: int = 8
    min_depth: float = 0.1
    max_depth: float = 100.0
    lighting_mode: str = "scale_shift"
    use_nit: bool = True
    use_residual_flow: bool = True
    use_denoise: bool = True
    denoiser: DenoiserSpec = field(default_factory=lambda: DenoiserSpec("gaussian_blur", {"sigma": 1.0}))
    stride: int = 1
    deterministic: bool = True

    def __post_init__(self):
        for name in ("epochs", "learning_rate", "batch_size", "alpha", "stride"):
            if getattr(self, name) is None or getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserSpec(**self.denoiser)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["denoiser"] = {"kind": self.denoiser.kind, "params": dict(self.denoiser.params)}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class TripletDataset:
    """Resolves a split manifest against a rendered dataset directory and
    serves (prev, center, next) image triples plus ground truth paths."""

    def __init__(self, dataset_dir, manifest: SplitManifest | str):
        self.root = Path(dataset_dir)
        self.dataset_manifest = load_dataset_manifest(self.root)
        if not isinstance(manifest, SplitManifest):
            manifest = load_manifest(manifest)
        self.manifest = manifest
        self.frames = {f["frame_id"]: f for f in self.dataset_manifest["frames"]}
        missing = [
            mid for t in manifest.triplets for mid in t.members() if mid not in self.frames
        ]
        if missing:
            raise ConfigurationError(f"manifest references unknown frames, e.g. {missing[:3]}")
        self.intrinsics = Intrinsics(**self.dataset_manifest["intrinsics"])
        self._cache: dict = {}

    def __len__(self):
        return len(self.manifest.triplets)

    def _image(self, frame_id: str) -> torch.Tensor:
        if frame_id not in self._cache:
            path = self.root / self.frames[frame_id]["image"]
            self._cache[frame_id] = torch.from_numpy(read_image(path))
        return self._cache[frame_id]

    def gt_arrays(self, frame_id: str) -> dict:
        with np.load(self.root / self.frames[frame_id]["gt"]) as data:
            return {k: np.array(data[k]) for k in data.files}

    def __getitem__(self, i: int) -> dict:
        t = self.manifest.triplets[i]
        return {
            "ids": t.members(),
            "prev": self._image(t.prev),
            "center": self._image(t.center),
            "next": self._image(t.next),
        }


def _chw(images: list) -> torch.Tensor:
    return torch.stack([im.permute(2, 0, 1) for im in images])


def _upsample_depth(depth: torch.Tensor, hw) -> torch.Tensor:
    return F.interpolate(depth.unsqueeze(1), size=hw, mode="bilinear", align_corners=False).squeeze(1)


class Trainer:
    def __init__(self, config: TrainConfig, dataset_dir, train_manifest,
                 val_manifest=None, run_dir=None):
        self.config = config
        if config.deterministic:
            torch.set_num_threads(1)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)

        self.data = TripletDataset(dataset_dir, train_manifest)
        self.val_data = TripletDataset(dataset_dir, val_manifest) if val_manifest else None
        self.intrinsics = self.data.intrinsics

        heads = ["pose"]
        if config.use_residual_flow:
            heads.append("residual_flow")
        if config.use_nit:
            heads.append("lighting")
        self.depth_net = DepthNet(DepthNetConfig(
            encoder_width=config.encoder_width,
            min_depth=config.min_depth, max_depth=config.max_depth))
        self.motion_net = MotionNet(MotionNetConfig(
            encoder_width=config.encoder_width, heads=tuple(heads),
            lighting_mode=config.lighting_mode))
        params = list(self.depth_net.parameters()) + list(self.motion_net.parameters())
        self.optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                          betas=(config.beta1, config.beta2))
        self.denoiser: Denoiser | None = build_denoiser(config.denoiser) if config.use_denoise else None

        self.run_dir = Path(run_dir) if run_dir else None
        self._log_handle = None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
            self._write_provenance()
            self._log_handle = open(self.run_dir / "loss_log.jsonl", "w")
        self.step_count = 0
        self.history: list = []

    def _write_provenance(self):
        from . import __version__

        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        record = {
            "config_sha256": hashlib.sha256(blob).hexdigest(),
            "seed": self.config.seed,
            "code_version": __version__,
            "dataset": self.data.dataset_manifest.get("name"),
            "dataset_sha256": self.data.dataset_manifest.get("scene_sha256"),
            "train_split": self.data.manifest.name,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        (self.run_dir / "provenance.json").write_text(json.dumps(record, indent=2))

    # -- loss assembly -----------------------------------------------------

    def _loss_targets(self, sample: dict) -> dict:
        """Denoised copies for the loss path; falls back to the raw images."""
        if self.denoiser is None:
            return {k: sample[k] for k in ("prev", "center", "next")}
        return {k: self.denoiser(sample[k]) for k in ("prev", "center", "next")}

    def _direction_outputs(self, center_chw, other_chw):
        feats, pose = self.motion_net(torch.cat([center_chw, other_chw], dim=1))
        pose_mats = pose.matrix()
        residual_levels = (
            self.motion_net.residual_decoder(feats) if self.config.use_residual_flow else None
        )
        lighting = (
            self.motion_net.lighting_decoder(feats[-1], center_chw.shape[-2:])
            if self.config.use_nit else None
        )
        return pose_mats, residual_levels, lighting

    def compute_batch_loss(self, batch: list) -> L.LossBreakdown:
        """Full bidirectional loss for a list of triplet samples.

        Geometry and losses run with a leading batch dimension; the per-image
        op contracts are unchanged (batching is a broadcast, not new math)."""
        cfg = self.config
        center = _chw([s["center"] for s in batch])
        others = {"next": _chw([s["next"] for s in batch]), "prev": _chw([s["prev"] for s in batch])}
        depth_scales = self.depth_net(center)
        per_sample_targets = [self._loss_targets(s) for s in batch]
        targets = {
            key: torch.stack([t[key] for t in per_sample_targets])
            for key in ("prev", "center", "next")
        }

        outputs = {}
        sparsity_terms = []
        identity_maps = {}
        for key in ("next", "prev"):
            pose_mats, residual_levels, lighting = self._direction_outputs(center, others[key])
            outputs[key] = (pose_mats, residual_levels, lighting)
            if residual_levels is not None:
                for b in range(len(batch)):
                    pyr = L.ResidualFlowPyramid(
                        [lv[b].permute(1, 2, 0) for lv in residual_levels])
                    sparsity_terms.append(L.residual_sparsity_loss(pyr))
            # unwarped neighbour map: scale-independent, computed once
            identity_maps[key], _ = L.photometric_loss(
                targets["center"], targets[key], alpha=cfg.alpha)
        sparsity = (
            torch.stack(sparsity_terms).reshape(2, len(batch)).sum(0).mean()
            if sparsity_terms else torch.zeros(())
        )

        hw = center.shape[-2:]
        photometric_scales = []
        smooth_scales = []
        for s, depth_s in enumerate(depth_scales):
            depth_full = _upsample_depth(depth_s, hw)
            maps, masks = {}, {}
            for key in ("next", "prev"):
                pose_mats, residual_levels, lighting = outputs[key]
                corr = reproject(depth_full, pose_mats, self.intrinsics)
                residual = (
                    residual_levels[0].permute(0, 2, 3, 1) if residual_levels is not None else None
                )
                recon, mask = reconstruct(targets[key], corr, residual)
                if lighting is not None:
                    lc = L.LightingChange(
                        contrast=lighting[0].permute(0, 2, 3, 1),
                        brightness=lighting[1].permute(0, 2, 3, 1),
                        mode=cfg.lighting_mode,
                    )
                    recon = L.apply_lighting(lc, recon)
                maps[key], _ = L.photometric_loss(targets["center"], recon, alpha=cfg.alpha)
                masks[key] = mask
            combined = L.combine_bidirectional(
                maps["next"], maps["prev"], identity_maps["next"], identity_maps["prev"],
                lr_fwd=torch.zeros(()), lr_bwd=torch.zeros(()), lg=torch.zeros(()),
                lambda_r=0.0, lambda_g=0.0,
                mask_fwd=masks["next"], mask_bwd=masks["prev"],
            )
            photometric_scales.append(combined.photometric)

            scale_img = F.interpolate(center, size=depth_s.shape[-2:], mode="area") if s else center
            smooth = L.smoothness_loss(depth_s, scale_img.permute(0, 2, 3, 1))
            smooth_scales.append(smooth / 2 ** s)

        photometric = torch.stack(photometric_scales).mean()
        smoothness = torch.stack(smooth_scales).mean()
        total = photometric + cfg.lambda_r * sparsity + cfg.lambda_g * smoothness
        return L.LossBreakdown(total=total, photometric=photometric,
                               sparsity=sparsity, smoothness=smoothness)

    # -- loop ---------------------------------------------------------------

    def _check_finite(self, breakdown: L.LossBreakdown, batch: list):
        for term in ("total", "photometric", "sparsity", "smoothness"):
            value = getattr(breakdown, term)
            if not torch.isfinite(value):
                ids = [s["ids"] for s in batch]
                raise NumericDivergenceError(
                    f"non-finite {term} at step {self.step_count} (batches {ids})",
                    step=self.step_count, term=term, batch_ids=ids,
                )

    def train_step(self, batch: list) -> dict:
        self.optimizer.zero_grad()
        breakdown = self.compute_batch_loss(batch)
        self._check_finite(breakdown, batch)
        breakdown.total.backward()
        self.optimizer.step()
        self.step_count += 1
        return breakdown.scalars()

    def _batches(self):
        order = self.rng.permutation(len(self.data))
        bs = self.config.batch_size
        for i in range(0, len(order) - bs + 1, bs):
            yield [self.data[int(j)] for j in order[i:i + bs]]

    def validate(self) -> float:
        if self.val_data is None:
            return float("nan")
        with torch.no_grad():
            vals = []
            for i in range(len(self.val_data)):
                breakdown = self.compute_batch_loss([self.val_data[i]])
                vals.append(float(breakdown.total))
        return float(np.mean(vals))

    def _log(self, record: dict):
        self.history.append(record)
        if self._log_handle:
            self._log_handle.write(json.dumps(record) + "\n")
            self._log_handle.flush()

    def train(self) -> dict:
        cfg = self.config
        best_val = float("inf")
        best_epoch = -1
        done = False
        for epoch in range(cfg.epochs):
            for batch in self._batches():
                scalars = self.train_step(batch)
                self._log({"step": self.step_count, "epoch": epoch, **scalars})
                if cfg.max_steps is not None and self.step_count >= cfg.max_steps:
                    done = True
                    break
            val_loss = self.validate()
            self._log({"step": self.step_count, "epoch": epoch, "val_total": val_loss})
            if self.run_dir:
                save_checkpoint(self.run_dir / "checkpoints" / "last.npz",
                                self.depth_net, self.motion_net,
                                extra={"epoch": epoch, "step": self.step_count})
                if not np.isnan(val_loss) and val_loss < best_val:
                    best_val, best_epoch = val_loss, epoch
                    save_checkpoint(self.run_dir / "checkpoints" / "best.npz",
                                    self.depth_net, self.motion_net,
                                    extra={"epoch": epoch, "step": self.step_count,
                                           "val_total": val_loss})
            if done:
                break
        if self.run_dir and not (self.run_dir / "checkpoints" / "best.npz").exists():
            save_checkpoint(self.run_dir / "checkpoints" / "best.npz",
                            self.depth_net, self.motion_net,
                            extra={"epoch": cfg.epochs - 1, "step": self.step_count})
        if self._log_handle:
            self._log_handle.close()
            self._log_handle = None
        return {"steps": self.step_count, "best_val": best_val, "best_epoch": best_epoch}
