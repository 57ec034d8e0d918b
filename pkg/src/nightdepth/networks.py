"""Trainable components: depth network, motion network and its three decoders.

The encoders are small residual CNNs sized for desk-scale runs (about 1e5
parameters per network at the default width).  Pose, residual-flow and
lighting decoders all hang off the motion encoder; the flow and lighting
output layers are zero-initialised so training starts at the exact rigid
baseline (R = 0, C = 1, B = 0) and the extra degrees of freedom are only
used when they reduce the loss.

Input convention between the outside world and the networks: single images
are H x W x 3 (channels last, [0, 1]); internally everything is NCHW and a
leading batch dimension is accepted everywhere.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .geometry import PoseSE3
from .losses import LightingChange, ResidualFlowPyramid

CHECKPOINT_VERSION = 1
POSE_SCALE = 0.01  # keeps early pose predictions small


@dataclass(frozen=True)
class DepthNetConfig:
    encoder_width: int = 8
    num_scales: int = 4
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if self.num_scales != 4:
            raise ConfigurationError("depth decoder emits exactly 4 scales")
        if not 0 < self.min_depth < self.max_depth:
            raise ConfigurationError("need 0 < min_depth < max_depth")


@dataclass(frozen=True)
class MotionNetConfig:
    encoder_width: int = 8
    num_encoder_stages: int = 5
    heads: tuple = ("pose", "residual_flow", "lighting")
    lighting_mode: str = "scale_shift"
    contrast_bound: float = 1.0
    brightness_bound: float = 0.5
    max_residual: float = 16.0

    def __post_init__(self):
        if self.num_encoder_stages < 4:
            raise ConfigurationError("residual flow decoder needs skip features from 4 stages")
        if "pose" not in self.heads:
            raise ConfigurationError("the pose head cannot be disabled")
        if self.lighting_mode not in ("scale_only", "scale_shift"):
            raise ConfigurationError(f"unknown lighting mode {self.lighting_mode!r}")


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Batched differentiable Rodrigues: (..., 3) -> (..., 3, 3)."""
    theta = torch.linalg.norm(axis_angle, dim=-1, keepdim=True).clamp(min=1e-12)
    k = axis_angle / theta
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = torch.zeros_like(kx)
    skew = torch.stack(
        [zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], dim=-1
    ).reshape(*axis_angle.shape[:-1], 3, 3)
    theta = theta.unsqueeze(-1)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + torch.sin(theta) * skew + (1 - torch.cos(theta)) * (skew @ skew)


@dataclass
class PoseParams:
    """Minimal ego-motion parameterisation: axis-angle rotation + translation."""

    axis_angle: torch.Tensor
    translation: torch.Tensor

    def matrix(self) -> torch.Tensor:
        """Differentiable homogeneous transform, (..., 4, 4)."""
        rot = axis_angle_to_matrix(self.axis_angle)
        batch = self.axis_angle.shape[:-1]
        m = torch.zeros(*batch, 4, 4, dtype=self.axis_angle.dtype, device=self.axis_angle.device)
        m[..., :3, :3] = rot
        m[..., :3, 3] = self.translation
        m[..., 3, 3] = 1.0
        return m

    def to_pose(self) -> PoseSE3:
        m = self.matrix().detach().cpu().numpy()
        if m.ndim != 2:
            raise InputError("to_pose expects unbatched parameters")
        return PoseSE3.from_matrix(m)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 4), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _gn(channels)
        self.norm2 = _gn(channels)

    def forward(self, x):
        out = F.elu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.elu(out + x)


class Encoder(nn.Module):
    """Stem + (num_stages - 1) downsampling residual stages; emits one feature
    map per stage at strides 2, 4, ..., 2^num_stages."""

    def __init__(self, in_channels: int, width: int, num_stages: int = 5):
        super().__init__()
        mult = [1, 2, 3, 4, 4, 4, 4][:num_stages]
        self.channels = [width * m for m in mult]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, self.channels[0], 3, stride=2, padding=1),
            _gn(self.channels[0]),
            nn.ELU(),
        )
        stages = []
        for c_in, c_out in zip(self.channels[:-1], self.channels[1:]):
            stages.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                _gn(c_out),
                nn.ELU(),
                ResidualBlock(c_out),
            ))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_skip, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in + c_skip, c_out, 3, padding=1)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return F.elu(self.conv(x))


def _as_batched(image, channels: int):
    """Accepts H x W x C or B x C x H x W; returns (BCHW tensor, had_batch)."""
    t = torch.as_tensor(image)
    if t.dim() == 3 and t.shape[-1] == channels:
        return t.permute(2, 0, 1).unsqueeze(0), False
    if t.dim() == 4 and t.shape[1] == channels:
        return t, True
    raise InputError(f"expected H x W x {channels} or B x {channels} x H x W, got {tuple(t.shape)}")


class DepthNet(nn.Module):
    """Encoder-decoder with skip connections; four sigmoid disparity heads."""

    def __init__(self, config: DepthNetConfig = DepthNetConfig()):
        super().__init__()
        self.config = config
        self.encoder = Encoder(3, config.encoder_width, num_stages=5)
        ch = self.encoder.channels
        dec = [max(ch[0] // 2, 8)] + ch[:-1]  # decoder widths at strides 1..16
        self.up4 = _UpBlock(ch[4], ch[3], dec[4])
        self.up3 = _UpBlock(dec[4], ch[2], dec[3])
        self.up2 = _UpBlock(dec[3], ch[1], dec[2])
        self.up1 = _UpBlock(dec[2], ch[0], dec[1])
        self.up0 = _UpBlock(dec[1], 0, dec[0])
        self.disp_heads = nn.ModuleList(
            [nn.Conv2d(dec[s], 1, 3, padding=1) for s in range(config.num_scales)]
        )
        for head in self.disp_heads:
            # start a few meters out instead of at the near limit; the scale
            # itself is irrelevant (monocular ambiguity) but a mid-range start
            # keeps early warps on-screen
            nn.init.constant_(head.bias, -3.5)

    def _disp_to_depth(self, disp):
        lo, hi = 1.0 / self.config.max_depth, 1.0 / self.config.min_depth
        return 1.0 / (lo + (hi - lo) * disp)

    def forward(self, image):
        """Returns depth maps at scales 0..3 (full resolution first).

        Accepts one H x W x 3 image (returns H/2^s x W/2^s maps) or a BCHW
        batch (returns B x H/2^s x W/2^s maps).
        """
        x, batched = _as_batched(image, 3)
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise InputError(f"image sides must be divisible by 32, got {tuple(x.shape[-2:])}")
        f = self.encoder(x)
        d4 = self.up4(f[4], f[3])
        d3 = self.up3(d4, f[2])
        d2 = self.up2(d3, f[1])
        d1 = self.up1(d2, f[0])
        d0 = self.up0(d1)
        depths = []
        for s, feat in enumerate([d0, d1, d2, d3]):
            disp = torch.sigmoid(self.disp_heads[s](feat))
            depth = self._disp_to_depth(disp).squeeze(1)
            depths.append(depth if batched else depth.squeeze(0))
        return depths


class PoseHead(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, 32, 1), nn.ELU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ELU(),
            nn.Conv2d(32, 6, 1),
        )

    def forward(self, f):
        out = self.net(f).mean(dim=(2, 3)) * POSE_SCALE
        return out[:, :3], out[:, 3:]


class ResidualFlowDecoder(nn.Module):
    """Decodes four flow maps (strides 1, 2, 4, 8) from the motion encoder
    features, deepest first, pulling in skip connections on the way up."""

    def __init__(self, channels, max_residual: float):
        super().__init__()
        self.max_residual = max_residual
        dec = [max(channels[0] // 2, 8)] + list(channels[:-1])
        self.up4 = _UpBlock(channels[4], channels[3], dec[4])
        self.up3 = _UpBlock(dec[4], channels[2], dec[3])
        self.up2 = _UpBlock(dec[3], channels[1], dec[2])
        self.up1 = _UpBlock(dec[2], channels[0], dec[1])
        self.up0 = _UpBlock(dec[1], 0, dec[0])
        self.heads = nn.ModuleList([nn.Conv2d(dec[s], 2, 3, padding=1) for s in range(4)])
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, feats):
        d4 = self.up4(feats[4], feats[3])
        d3 = self.up3(d4, feats[2])
        d2 = self.up2(d3, feats[1])
        d1 = self.up1(d2, feats[0])
        d0 = self.up0(d1)
        levels = []
        for s, feat in enumerate([d0, d1, d2, d3]):
            bound = self.max_residual / 2 ** s
            levels.append(bound * torch.tanh(self.heads[s](feat)))
        return levels  # BCHW, flow channels (x, y) in pixels at each level's scale


class LightingDecoder(nn.Module):
    """Predicts the per-pixel contrast/brightness maps from the deepest motion
    feature; decoded at stride 4 and bilinearly upsampled to full resolution."""

    def __init__(self, c_in, mode: str, contrast_bound: float, brightness_bound: float):
        super().__init__()
        self.mode = mode
        self.contrast_bound = contrast_bound
        self.brightness_bound = brightness_bound
        c = max(c_in // 2, 16)
        self.up1 = _UpBlock(c_in, 0, c)
        self.up2 = _UpBlock(c, 0, c)
        self.up3 = _UpBlock(c, 0, c)
        out_ch = 1 if mode == "scale_only" else 2
        self.head = nn.Conv2d(c, out_ch, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, f_deep, out_hw):
        x = self.up3(self.up2(self.up1(f_deep)))
        raw = F.interpolate(self.head(x), size=out_hw, mode="bilinear", align_corners=False)
        contrast = (1.0 + self.contrast_bound * torch.tanh(raw[:, :1])).clamp(min=1e-4)
        if self.mode == "scale_only":
            brightness = torch.zeros_like(contrast)
        else:
            brightness = self.brightness_bound * torch.tanh(raw[:, 1:2])
        return contrast, brightness


class MotionNet(nn.Module):
    """Shared encoder over a concatenated image pair, plus pose, residual-flow
    and lighting heads (the latter two obey `config.heads`)."""

    def __init__(self, config: MotionNetConfig = MotionNetConfig()):
        super().__init__()
        self.config = config
        self.encoder = Encoder(6, config.encoder_width, num_stages=config.num_encoder_stages)
        ch = self.encoder.channels
        self.pose_head = PoseHead(ch[-1])
        self.residual_decoder = (
            ResidualFlowDecoder(ch, config.max_residual) if "residual_flow" in config.heads else None
        )
        self.lighting_decoder = (
            LightingDecoder(ch[-1], config.lighting_mode, config.contrast_bound, config.brightness_bound)
            if "lighting" in config.heads else None
        )

    def _encode(self, pair):
        if isinstance(pair, (tuple, list)):
            a, _ = _as_batched(pair[0], 3)
            b, _ = _as_batched(pair[1], 3)
            x = torch.cat([a, b], dim=1)
            batched = torch.as_tensor(pair[0]).dim() == 4
        else:
            x, batched = _as_batched(pair, 6)
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise InputError(f"image sides must be divisible by 32, got {tuple(x.shape[-2:])}")
        return self.encoder(x), batched, x.shape[-2:]

    def forward(self, pair):
        """Returns (encoder features, PoseParams).  The feature list feeds the
        residual-flow and lighting decoders via their dedicated methods."""
        feats, batched, _ = self._encode(pair)
        aa, tr = self.pose_head(feats[-1])
        if not batched:
            aa, tr = aa.squeeze(0), tr.squeeze(0)
        return feats, PoseParams(axis_angle=aa, translation=tr)

    def decode_residual_flow(self, feats) -> ResidualFlowPyramid | list:
        """Single-sample input yields a ResidualFlowPyramid (H x W x 2 levels);
        batched input yields the raw BCHW level list."""
        if self.residual_decoder is None:
            raise ConfigurationError("residual_flow head is disabled")
        levels = self.residual_decoder(feats)
        if levels[0].shape[0] == 1:
            return ResidualFlowPyramid([lv.squeeze(0).permute(1, 2, 0) for lv in levels])
        return levels

    def decode_lighting(self, feats, out_hw) -> LightingChange | tuple:
        if self.lighting_decoder is None:
            raise ConfigurationError("lighting head is disabled")
        contrast, brightness = self.lighting_decoder(feats[-1], out_hw)
        if contrast.shape[0] == 1:
            return LightingChange(
                contrast=contrast.squeeze(0).permute(1, 2, 0),
                brightness=brightness.squeeze(0).permute(1, 2, 0),
                mode=self.config.lighting_mode,
            )
        return contrast, brightness


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints: a .npz container with little-endian float32 arrays plus a JSON
# header (format version + both configs).  Documented in the README.

def save_checkpoint(path, depth_net: DepthNet, motion_net: MotionNet, extra: dict | None = None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "depth_config": asdict(depth_net.config),
        "motion_config": {**asdict(motion_net.config), "heads": list(motion_net.config.heads)},
        "extra": extra or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for prefix, net in (("depth", depth_net), ("motion", motion_net)):
        for name, tensor in net.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Rebuilds (depth_net, motion_net, extra) from a checkpoint file."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {header.get('format_version')}")
        mc = dict(header["motion_config"])
        mc["heads"] = tuple(mc["heads"])
        depth_net = DepthNet(DepthNetConfig(**header["depth_config"]))
        motion_net = MotionNet(MotionNetConfig(**mc))
        for prefix, net in (("depth", depth_net), ("motion", motion_net)):
            state = {
                key[len(prefix) + 1:]: torch.from_numpy(np.array(data[key]))
                for key in data.files if key.startswith(prefix + "/")
            }
            net.load_state_dict(state)
    return depth_net, motion_net, header.get("extra", {})
