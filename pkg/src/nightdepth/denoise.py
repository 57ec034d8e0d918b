"""Pluggable denoiser, used ONLY inside the training-loss path.

The networks always see the original images; the denoiser cleans the loss
targets.  Its output is treated as a constant (no gradients flow through it),
matching the use of a frozen pretrained model.  `external_adapter` defines a
file-exchange protocol so a real denoising model running in another process
can be plugged in; it fails loudly when the peer does not answer.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import AdapterError, ConfigurationError

KINDS = ("identity", "gaussian_blur", "external_adapter")


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str = "gaussian_blur"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "gaussian_blur":
            sigma = self.params.get("sigma", 1.0)
            if sigma <= 0:
                raise ConfigurationError("gaussian_blur sigma must be positive")
        if self.kind == "external_adapter" and "exchange_dir" not in self.params:
            raise ConfigurationError("external_adapter requires an exchange_dir param")


def _gaussian_kernel1d(sigma: float, dtype) -> torch.Tensor:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


class Denoiser:
    """Callable wrapper with a call counter, so eval runs can assert that the
    inference path never touches the denoiser."""

    def __init__(self, spec: DenoiserSpec):
        self.spec = spec
        self.call_count = 0
        if spec.kind == "external_adapter":
            exchange = Path(spec.params["exchange_dir"])
            if not exchange.is_dir():
                raise AdapterError(f"exchange directory {exchange} does not exist")
            self._exchange = exchange
            self._timeout = float(spec.params.get("timeout_s", 10.0))
            self._poll = float(spec.params.get("poll_interval_s", 0.05))

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        """Denoises one H x W x C image in [0, 1]; output has the same shape,
        stays in [0, 1] and never carries gradients."""
        self.call_count += 1
        image = torch.as_tensor(image)
        with torch.no_grad():
            if self.spec.kind == "identity":
                return image.detach().clone()
            if self.spec.kind == "gaussian_blur":
                return self._blur(image.detach())
            return self._external(image.detach())

    def _blur(self, image: torch.Tensor) -> torch.Tensor:
        sigma = float(self.spec.params.get("sigma", 1.0))
        k = _gaussian_kernel1d(sigma, image.dtype)
        r = (len(k) - 1) // 2
        x = image.permute(2, 0, 1).unsqueeze(1)  # C,1,H,W
        x = torch.nn.functional.pad(x, (r, r, r, r), mode="reflect")
        x = torch.nn.functional.conv2d(x, k.view(1, 1, 1, -1))
        x = torch.nn.functional.conv2d(x, k.view(1, 1, -1, 1))
        return x.squeeze(1).permute(1, 2, 0).clamp(0.0, 1.0)

    def _external(self, image: torch.Tensor) -> torch.Tensor:
        from .imgio import read_image, write_image

        request_id = uuid.uuid4().hex
        request = self._exchange / f"request_{request_id}.png"
        response = self._exchange / f"response_{request_id}.png"
        write_image(request, image.cpu().numpy())
        deadline = time.monotonic() + self._timeout
        while time.monotonic() < deadline:
            if response.exists():
                try:
                    out = read_image(response)
                finally:
                    response.unlink(missing_ok=True)
                    request.unlink(missing_ok=True)
                return torch.from_numpy(out).to(image.dtype).clamp(0.0, 1.0)
            time.sleep(self._poll)
        request.unlink(missing_ok=True)
        raise AdapterError(
            f"external denoiser did not answer within {self._timeout}s (request {request_id})"
        )


def build_denoiser(spec: DenoiserSpec) -> Denoiser:
    return Denoiser(spec)
