"""Shared test utilities: finite-difference gradient checking and small oracles."""

import numpy as np
import torch


def finite_diff_grad(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of scalar fn w.r.t. x, element by element."""
    x = x.detach().double()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def check_gradient(fn, x: torch.Tensor, h: float = 1e-4, rtol: float = 1e-4) -> float:
    """Returns the relative error between analytic and central-difference
    gradients and asserts it is below rtol."""
    g_fd = finite_diff_grad(fn, x, h=h)
    g_an = analytic_grad(fn, x)
    rel = float((g_fd - g_an).norm() / (g_an.norm() + 1e-12))
    assert rel < rtol, f"gradient mismatch: rel err {rel:.3e} (analytic norm {float(g_an.norm()):.3e})"
    return rel


def brute_force_reproject(depth: np.ndarray, pose_mat: np.ndarray, intr):
    """Per-pixel homogeneous-matrix reprojection oracle (independent of the
    package's vectorised implementation)."""
    h, w = depth.shape
    k = intr.matrix()
    k_inv = np.linalg.inv(k)
    points = np.zeros((h, w, 2))
    z_out = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            ray = k_inv @ np.array([u, v, 1.0])
            cam = ray * depth[v, u]
            moved = pose_mat[:3, :3] @ cam + pose_mat[:3, 3]
            z_out[v, u] = moved[2]
            z = moved[2] if moved[2] > 1e-3 else 1e-3
            proj = k @ (moved / z)
            points[v, u] = proj[:2]
    return points, z_out


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)
