"""Differentiable camera geometry: reprojection, validity masking, bilinear sampling.

Conventions used throughout the package:
  * images are H x W x C float tensors, pixel values in [0, 1];
  * continuous pixel coordinates place the pixel CENTER at the integer coordinate;
  * a correspondence point is (x, y) = (column, row);
  * rounding for the validity mask is round-half-away-from-zero;
  * out-of-bounds samples contribute zero (never border clamp).

`reproject` implements  V(u) = project(K . T . depth(u) . K^-1 . u_hom)  and is
differentiable w.r.t. the depth map and (when the pose is passed as a torch
4x4 matrix) the pose parameters.  Points that land behind the camera are
masked with Z_MIN rather than producing non-finite coordinates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InputError

# Behind-camera cutoff for the validity test (meters).
Z_MIN = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ConfigurationError(f"image size must be at least 2x2, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix())

    def with_size(self, width: int, height: int) -> "Intrinsics":
        return dataclasses.replace(self, width=width, height=height)


def rotation_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula; returns a 3x3 rotation for an axis-angle 3-vector."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def axis_angle_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Inverse of `rotation_from_axis_angle`; valid for angles below pi."""
    r = np.asarray(rotation, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis = axis / (2.0 * np.sin(theta))
    return axis * theta


@dataclass
class PoseSE3:
    """Rigid transform. `transform(p) = rotation @ p + translation` maps points
    expressed in the source camera frame into the target camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise InputError("pose contains non-finite values")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise InputError(f"rotation is not orthonormal (|R^T R - I| = {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise InputError("rotation has negative determinant")

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "PoseSE3":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis_angle, translation) -> "PoseSE3":
        return cls(rotation_from_axis_angle(axis_angle), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Returns the transform `self after other`: (self @ other)(p) = self(other(p))."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Applies the transform to an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(axis_angle_from_rotation(self.rotation)))


@dataclass
class CorrespondenceField:
    """Per-pixel reprojection targets.

    `points` is H x W x 2 continuous (x, y) coordinates in the other frame;
    `valid` combines the in-front-of-camera test with the rounded bounds test;
    `z_valid` keeps the depth test alone so masks can be recomputed after a
    residual flow is added to the points.
    """

    points: torch.Tensor
    valid: torch.Tensor
    z_valid: torch.Tensor


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    # torch.round is round-half-to-even; the mask convention here is half-away-from-zero.
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _bounds_mask(points: torch.Tensor, width: int, height: int) -> torch.Tensor:
    rx = _round_half_away(points[..., 0])
    ry = _round_half_away(points[..., 1])
    return (rx >= 0) & (rx <= width - 1) & (ry >= 0) & (ry <= height - 1)


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """H x W x 2 tensor of (x, y) pixel-center coordinates."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def reproject(depth: torch.Tensor, pose, intr: Intrinsics) -> CorrespondenceField:
    """Reprojects every pixel of the depth map into the other frame.

    `pose` may be a PoseSE3 (treated as constant) or a 4x4 torch tensor, in
    which case gradients flow into the pose entries as well as into `depth`.
    A leading batch dimension on depth (and pose) is supported.
    """
    depth = torch.as_tensor(depth)
    if depth.dim() < 2:
        raise InputError(f"depth must be (..., H, W), got shape {tuple(depth.shape)}")
    if torch.isnan(depth).any():
        raise InputError("depth contains NaN")
    if isinstance(pose, PoseSE3):
        pose_mat = torch.as_tensor(pose.matrix(), dtype=depth.dtype)
    else:
        pose_mat = torch.as_tensor(pose)
        if pose_mat.shape[-2:] != (4, 4):
            raise InputError(f"pose matrix must be (..., 4, 4), got {tuple(pose_mat.shape)}")
    h, w = depth.shape[-2:]
    grid = pixel_grid(h, w, dtype=depth.dtype, device=depth.device)

    # Back-project: K^-1 u_hom, scaled by depth.
    x_n = (grid[..., 0] - intr.cx) / intr.fx
    y_n = (grid[..., 1] - intr.cy) / intr.fy
    cam = torch.stack([x_n * depth, y_n * depth, depth], dim=-1)

    rot = pose_mat[..., :3, :3].to(depth.dtype)
    trans = pose_mat[..., :3, 3].to(depth.dtype)
    moved = torch.einsum("...ij,...hwj->...hwi", rot, cam) + trans[..., None, None, :]

    z = moved[..., 2]
    z_valid = z > Z_MIN
    z_safe = torch.clamp(z, min=Z_MIN)  # keeps coordinates finite behind the camera
    px = intr.fx * moved[..., 0] / z_safe + intr.cx
    py = intr.fy * moved[..., 1] / z_safe + intr.cy
    points = torch.stack([px, py], dim=-1)

    valid = z_valid & _bounds_mask(points, intr.width, intr.height)
    return CorrespondenceField(points=points, valid=valid, z_valid=z_valid)


def bilinear_sample(image: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Samples `image` (..., H, W, C) at continuous `points` (..., H', W', 2).

    Out-of-bounds corner pixels contribute zero, so a sample degrades smoothly
    to black as it leaves the image; fully outside points return exactly zero.
    Differentiable w.r.t. both the image values and the points.  Leading batch
    dimensions, when present, must agree between image and points.
    """
    image = torch.as_tensor(image)
    points = torch.as_tensor(points)
    if image.dim() < 3:
        raise InputError(f"image must be (..., H, W, C), got shape {tuple(image.shape)}")
    if points.shape[-1] != 2:
        raise InputError(f"points must end in (x, y) pairs, got shape {tuple(points.shape)}")
    if image.shape[:-3] != points.shape[:-3]:
        raise InputError(
            f"batch dims differ: image {tuple(image.shape[:-3])} vs points {tuple(points.shape[:-3])}"
        )
    if not torch.isfinite(points).all():
        raise InputError("sample points must be finite")

    lead = image.shape[:-3]
    h, w, c = image.shape[-3:]
    ph, pw = points.shape[-3:-1]
    batch = int(np.prod(lead)) if lead else 1
    flat = image.reshape(batch, h * w, c)
    x = points[..., 0].reshape(batch, ph * pw)
    y = points[..., 1].reshape(batch, ph * pw)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0

    out = None
    for xi, wxi in ((x0, 1.0 - wx1), (x0 + 1.0, wx1)):
        for yi, wyi in ((y0, 1.0 - wy1), (y0 + 1.0, wy1)):
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            xl = torch.clamp(xi, 0, w - 1).long()
            yl = torch.clamp(yi, 0, h - 1).long()
            idx = (yl * w + xl).unsqueeze(-1).expand(-1, -1, c)
            vals = torch.gather(flat, 1, idx)
            weight = (wxi * wyi * inside.to(image.dtype)).unsqueeze(-1)
            contrib = vals * weight
            out = contrib if out is None else out + contrib
    return out.reshape(*lead, ph, pw, c)


def reconstruct(next_image: torch.Tensor, corr: CorrespondenceField, residual: torch.Tensor | None = None):
    """Warps `next_image` back through the correspondence field.

    If `residual` (H x W x 2, pixels) is given it is added to the points first
    and the validity mask is recomputed for the shifted points.  Pixels outside
    the mask are set to zero and carry no gradient.
    Returns (reconstructed image, mask).
    """
    next_image = torch.as_tensor(next_image)
    points = corr.points
    if residual is not None:
        residual = torch.as_tensor(residual)
        if residual.shape != points.shape:
            raise InputError(
                f"residual shape {tuple(residual.shape)} does not match points {tuple(points.shape)}"
            )
        points = points + residual
    if points.shape[:-1] != next_image.shape[:-1]:
        raise InputError(
            f"correspondence grid {tuple(points.shape[:-1])} does not match image {tuple(next_image.shape[:-1])}"
        )
    h, w = next_image.shape[-3:-1]
    mask = corr.z_valid & _bounds_mask(points, w, h)
    sampled = bilinear_sample(next_image, points)
    return sampled * mask.to(sampled.dtype).unsqueeze(-1), mask
