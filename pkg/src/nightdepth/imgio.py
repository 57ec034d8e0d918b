"""Lossless-ish image file I/O: 16-bit RGB PNGs for float images in [0, 1].

The 1/65535 quantization is far below every tolerance used in this project;
ground-truth arrays that must be exact are stored as .npz instead.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .errors import InputError

_MAX16 = 65535


def write_image(path, image: np.ndarray):
    """Writes an H x W x 3 float image in [0, 1] as a 16-bit PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InputError(f"expected H x W x 3 image, got {image.shape}")
    data = np.clip(image, 0.0, 1.0)
    u16 = np.round(data * _MAX16).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(u16, cv2.COLOR_RGB2BGR)):
        raise IOError(f"failed to write {path}")


def read_image(path) -> np.ndarray:
    """Reads a PNG written by `write_image` back to float32 RGB in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    if raw.ndim == 2:
        raw = raw[..., None].repeat(3, axis=-1)
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    scale = _MAX16 if rgb.dtype == np.uint16 else 255
    return rgb.astype(np.float32) / scale
