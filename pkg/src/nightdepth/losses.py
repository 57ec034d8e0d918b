"""Training losses.

All functions operate on single images (H x W x C torch tensors, channels
last) and are differentiable unless stated otherwise.  Masked pixels are
excluded from every reduction so zero-filled warp pixels never leak into
gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InputError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_ALPHA = 0.85
SPARSITY_EPS = 1e-8

LIGHTING_MODES = ("scale_only", "scale_shift")


class EmptyMaskWarning(UserWarning):
    """Raised-as-warning when a photometric mask contains no valid pixels."""


@dataclass
class LightingChange:
    """Per-pixel affine intensity compensation: compensated = contrast * image + brightness.

    `contrast` and `brightness` are H x W x 1 and broadcast over the colour
    channels.  In scale_only mode the brightness image must be identically
    zero; this is checked at construction time.
    """

    contrast: torch.Tensor
    brightness: torch.Tensor
    mode: str = "scale_shift"

    def __post_init__(self):
        if self.mode not in LIGHTING_MODES:
            raise InputError(f"unknown lighting mode {self.mode!r}")
        if self.contrast.dim() < 3 or self.contrast.shape[-1] != 1:
            raise InputError(f"contrast must be (..., H, W, 1), got {tuple(self.contrast.shape)}")
        if self.brightness.shape != self.contrast.shape:
            raise InputError("contrast and brightness shapes differ")
        if self.mode == "scale_only" and bool((self.brightness != 0).any()):
            raise InputError("scale_only lighting must carry an all-zero brightness image")

    def validate(self):
        if not bool((self.contrast > 0).all()):
            raise InputError("contrast must be positive everywhere")
        if not bool(torch.isfinite(self.contrast).all() and torch.isfinite(self.brightness).all()):
            raise InputError("lighting maps must be finite")

    @classmethod
    def identity(cls, height: int, width: int, dtype=torch.float32) -> "LightingChange":
        one = torch.ones(height, width, 1, dtype=dtype)
        return cls(contrast=one, brightness=torch.zeros_like(one), mode="scale_shift")


@dataclass
class ResidualFlowPyramid:
    """Residual flow maps at four scales; level s is (H / 2^s) x (W / 2^s) x 2
    in pixel units of that scale.  Level 0 corrects the full-resolution warp."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 4:
            raise InputError(f"expected 4 pyramid levels, got {len(self.levels)}")
        h0, w0 = self.levels[0].shape[:2]
        for s, level in enumerate(self.levels):
            if level.shape != (h0 >> s, w0 >> s, 2):
                raise InputError(
                    f"level {s} has shape {tuple(level.shape)}, expected {(h0 >> s, w0 >> s, 2)}"
                )

    @property
    def full_resolution(self) -> torch.Tensor:
        return self.levels[0]

    @classmethod
    def zeros(cls, height: int, width: int, dtype=torch.float32) -> "ResidualFlowPyramid":
        return cls([torch.zeros(height >> s, width >> s, 2, dtype=dtype) for s in range(4)])


@dataclass
class LossBreakdown:
    total: torch.Tensor
    photometric: torch.Tensor
    sparsity: torch.Tensor
    smoothness: torch.Tensor
    per_pixel_min_map: torch.Tensor = field(repr=False, default=None)

    def scalars(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "photometric": float(self.photometric.detach()),
            "sparsity": float(torch.as_tensor(self.sparsity).detach()),
            "smoothness": float(torch.as_tensor(self.smoothness).detach()),
        }


def _mean_filter_3x3(x: torch.Tensor) -> torch.Tensor:
    # x: 1 x C x H x W, reflection-padded 3x3 box statistics (same size out).
    return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, 1)


def _to_bchw(image: torch.Tensor):
    lead = image.shape[:-3]
    h, w, c = image.shape[-3:]
    return image.reshape(-1, h, w, c).permute(0, 3, 1, 2), lead


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Single-scale SSIM with 3x3 box statistics, channel-averaged.

    Maps (..., H, W, C) image pairs to a (..., H, W) similarity map in [-1, 1]."""
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x, lead = _to_bchw(a)
    y, _ = _to_bchw(b)

    # one box-filter pass over the five stacked moment images
    stats = _mean_filter_3x3(torch.cat([x, y, x * x, y * y, x * y], dim=1))
    mu_x, mu_y, m_xx, m_yy, m_xy = stats.chunk(5, dim=1)
    sigma_x = m_xx - mu_x * mu_x
    sigma_y = m_yy - mu_y * mu_y
    sigma_xy = m_xy - mu_x * mu_y

    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    out = torch.clamp(num / den, -1.0, 1.0).mean(dim=1)
    return out.reshape(*lead, *out.shape[-2:])


def apply_lighting(lc: LightingChange, recon: torch.Tensor) -> torch.Tensor:
    """compensated = contrast * recon + brightness (Hadamard, broadcast over channels)."""
    return lc.contrast * recon + lc.brightness


def photometric_loss(
    target: torch.Tensor,
    pred: torch.Tensor,
    mask: torch.Tensor | None = None,
    alpha: float = DEFAULT_ALPHA,
):
    """Convex combination of structural dissimilarity and L1 difference.

    Returns (per-pixel (..., H, W) loss map, mean over masked pixels).  The map
    is computed everywhere; only the mean respects the mask.  An empty mask
    yields mean 0 and an EmptyMaskWarning.
    """
    if target.shape != pred.shape:
        raise InputError(f"shape mismatch {tuple(target.shape)} vs {tuple(pred.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must be in [0, 1], got {alpha}")
    l1 = torch.abs(target - pred).mean(dim=-1)
    if alpha == 0.0:
        loss_map = l1
    else:
        dssim = (1.0 - ssim(target, pred)) / 2.0
        loss_map = alpha * dssim + (1.0 - alpha) * l1
    if mask is None:
        return loss_map, loss_map.mean()
    mask = mask.to(loss_map.dtype)
    n = mask.sum()
    if n == 0:
        warnings.warn("photometric mask is empty; loss defined as 0", EmptyMaskWarning)
        return loss_map, torch.zeros((), dtype=loss_map.dtype)
    return loss_map, (loss_map * mask).sum() / n


def residual_sparsity_loss(pyr: ResidualFlowPyramid, eps: float = SPARSITY_EPS) -> torch.Tensor:
    """Concave sparsity penalty summed over pyramid levels.

    Per level s:  (<|R_s|> / 2^s) * sum_u sqrt(1 + |R_s(u)| / <|R_s|>), where
    |.| is the per-pixel L1 norm over the two flow components and <.> the
    spatial mean.  The divisor is clamped from below at `eps` so the all-zero
    pyramid evaluates to exactly zero while a constant-magnitude map keeps the
    closed form c * N * sqrt(2) exactly.
    """
    total = None
    for s, level in enumerate(pyr.levels):
        mag = level.abs().sum(dim=-1)
        mean_mag = mag.mean()
        term = (mean_mag / 2 ** s) * torch.sqrt(1.0 + mag / torch.clamp(mean_mag, min=eps)).sum()
        total = term if total is None else total + term
    return total


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness on mean-normalised inverse depth.

    Depth is (..., H, W) with a matching (..., H, W, C) image; the disparity
    normalisation is per sample, the returned scalar averages everything."""
    if depth.shape != image.shape[:-1]:
        raise InputError(
            f"depth {tuple(depth.shape)} does not match image {tuple(image.shape[:-1])}"
        )
    disp = 1.0 / depth
    norm_disp = disp / (disp.mean(dim=(-2, -1), keepdim=True) + 1e-7)

    grad_disp_x = torch.abs(norm_disp[..., :, 1:] - norm_disp[..., :, :-1])
    grad_disp_y = torch.abs(norm_disp[..., 1:, :] - norm_disp[..., :-1, :])
    grad_img_x = torch.abs(image[..., :, 1:, :] - image[..., :, :-1, :]).mean(dim=-1)
    grad_img_y = torch.abs(image[..., 1:, :, :] - image[..., :-1, :, :]).mean(dim=-1)

    return (grad_disp_x * torch.exp(-grad_img_x)).mean() + (grad_disp_y * torch.exp(-grad_img_y)).mean()


def combine_bidirectional(
    lp_fwd: torch.Tensor,
    lp_bwd: torch.Tensor,
    la_fwd: torch.Tensor,
    la_bwd: torch.Tensor,
    lr_fwd,
    lr_bwd,
    lg,
    lambda_r: float,
    lambda_g: float,
    mask_fwd: torch.Tensor | None = None,
    mask_bwd: torch.Tensor | None = None,
) -> LossBreakdown:
    """Per-pixel minimum over the four reprojection maps, then the weighted sum.

    The auto-mask maps (la_*) are always valid; warped maps may carry masks, in
    which case their invalid pixels are excluded from the minimum.  Taking the
    minimum per pixel before averaging suppresses occluded and zero-parallax
    pixels without a hand-tuned threshold.
    """
    maps = [lp_fwd, lp_bwd, la_fwd, la_bwd]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise InputError("loss maps must share one shape")
    big = torch.tensor(float("inf"), dtype=lp_fwd.dtype)
    if mask_fwd is not None:
        maps[0] = torch.where(mask_fwd, lp_fwd, big)
    if mask_bwd is not None:
        maps[1] = torch.where(mask_bwd, lp_bwd, big)
    per_pixel_min = torch.stack(maps, dim=0).min(dim=0).values
    photometric = per_pixel_min.mean()
    sparsity = lr_fwd + lr_bwd
    total = photometric + lambda_r * sparsity + lambda_g * lg
    return LossBreakdown(
        total=total,
        photometric=photometric,
        sparsity=torch.as_tensor(sparsity),
        smoothness=torch.as_tensor(lg),
        per_pixel_min_map=per_pixel_min,
    )
