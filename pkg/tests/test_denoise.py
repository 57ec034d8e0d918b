import threading
import time

import numpy as np
import pytest
import torch

from nightdepth.denoise import Denoiser, DenoiserSpec, build_denoiser
from nightdepth.errors import AdapterError, ConfigurationError
from nightdepth.imgio import read_image, write_image
from nightdepth.synthetic import add_noise


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        DenoiserSpec("median")
    with pytest.raises(ConfigurationError):
        DenoiserSpec("gaussian_blur", {"sigma": 0.0})
    with pytest.raises(ConfigurationError):
        DenoiserSpec("external_adapter", {})


def test_identity_is_bit_exact():
    dn = build_denoiser(DenoiserSpec("identity"))
    image = torch.rand(16, 16, 3)
    out = dn(image)
    assert torch.equal(out, image)
    assert out.data_ptr() != image.data_ptr()  # a copy, not an alias
    assert dn.call_count == 1


def test_blur_reduces_noise_mse():
    # smooth clean image + zero-mean noise: the blurred noisy image must be
    # closer to the clean one than the noisy input is
    ys, xs = np.meshgrid(np.linspace(0, 1, 64), np.linspace(0, 1, 64), indexing="ij")
    clean = np.stack([0.4 + 0.2 * np.sin(4 * xs) * np.cos(3 * ys)] * 3, axis=-1)
    noisy = add_noise(clean, 25.0 / 255.0, seed=0)
    dn = build_denoiser(DenoiserSpec("gaussian_blur", {"sigma": 1.2}))
    out = dn(torch.from_numpy(noisy)).numpy()
    mse_noisy = ((noisy - clean) ** 2).mean()
    mse_denoised = ((out - clean) ** 2).mean()
    assert mse_denoised < mse_noisy


def test_blur_keeps_constant_image():
    dn = build_denoiser(DenoiserSpec("gaussian_blur", {"sigma": 2.0}))
    image = torch.full((16, 16, 3), 0.37, dtype=torch.float64)
    out = dn(image)
    assert (out - image).abs().max() < 1e-12  # reflect padding preserves constants


def test_blur_is_deterministic_and_bounded():
    dn = build_denoiser(DenoiserSpec("gaussian_blur", {"sigma": 0.8}))
    image = torch.rand(32, 32, 3, dtype=torch.float64)
    a, b = dn(image), dn(image)
    assert torch.equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.shape == image.shape


def test_denoised_output_carries_no_gradient():
    dn = build_denoiser(DenoiserSpec("gaussian_blur", {"sigma": 1.0}))
    image = torch.rand(16, 16, 3, requires_grad=True)
    out = dn(image)
    assert not out.requires_grad


def test_external_adapter_round_trip(tmp_path):
    exchange = tmp_path / "exchange"
    exchange.mkdir()

    def responder():
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            requests = list(exchange.glob("request_*.png"))
            if requests:
                req = requests[0]
                image = read_image(req)
                write_image(exchange / req.name.replace("request", "response"), image)
                return
            time.sleep(0.01)

    thread = threading.Thread(target=responder)
    thread.start()
    dn = build_denoiser(DenoiserSpec("external_adapter",
                                     {"exchange_dir": str(exchange), "timeout_s": 5.0}))
    image = torch.rand(16, 16, 3)
    out = dn(image)
    thread.join()
    assert out.shape == image.shape
    assert (out - image).abs().max() < 1e-3  # 16-bit file round trip
    assert not list(exchange.glob("*.png"))  # cleaned up


def test_external_adapter_times_out_loudly(tmp_path):
    exchange = tmp_path / "exchange"
    exchange.mkdir()
    dn = build_denoiser(DenoiserSpec("external_adapter",
                                     {"exchange_dir": str(exchange), "timeout_s": 0.2}))
    with pytest.raises(AdapterError):
        dn(torch.rand(8, 8, 3))


def test_external_adapter_missing_dir_fails_at_build(tmp_path):
    with pytest.raises(AdapterError):
        build_denoiser(DenoiserSpec("external_adapter",
                                    {"exchange_dir": str(tmp_path / "nope")}))


def test_call_counter_tracks_usage():
    dn = build_denoiser(DenoiserSpec("identity"))
    assert dn.call_count == 0
    for _ in range(3):
        dn(torch.rand(4, 4, 3))
    assert dn.call_count == 3
