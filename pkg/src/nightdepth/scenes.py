"""Desk-scale scene presets used by the test-suite and the render-synthetic CLI.

All presets share a textured corridor (camera axis +z, y down) whose camera
advances with a gentle lateral sway so forward motion still carries parallax.
Textures are smooth sinusoids: the renderer point-samples one ray per pixel,
and band-limited textures keep bilinear resampling error well inside the
photometric oracle tolerance.
"""

from __future__ import annotations

import numpy as np

from .geometry import Intrinsics, PoseSE3
from .synthetic import Light, Plane, SceneSpec, Sphere, Texture

PRESETS = {}


def _register(fn):
    PRESETS[fn.__name__] = fn
    return fn


def _camera_track(n_frames: int, step: float, sway: float = 0.18):
    poses = []
    for t in range(n_frames):
        x = sway * np.sin(2 * np.pi * t / 9.0)
        y = 0.06 * np.sin(2 * np.pi * t / 13.0)
        poses.append(PoseSE3(np.eye(3), np.array([x, y, step * t])))
    return poses


def _corridor_surfaces(length: float = 46.0, half_w: float = 1.5, half_h: float = 1.2):
    zc = length / 2.0
    hz = length / 2.0 + 1.0
    return [
        Plane(center=[-half_w, 0, zc], u_axis=[0, 1, 0], v_axis=[0, 0, 1],
              half_u=half_h + 0.3, half_v=hz, albedo=[0.92, 0.78, 0.65],
              texture=Texture("waves", {"scale": 2.6, "low": 0.4, "high": 1.0})),
        Plane(center=[half_w, 0, zc], u_axis=[0, 0, 1], v_axis=[0, 1, 0],
              half_u=hz, half_v=half_h + 0.3, albedo=[0.62, 0.80, 0.95],
              texture=Texture("waves", {"scale": 2.2, "low": 0.4, "high": 1.0})),
        Plane(center=[0, half_h, zc], u_axis=[1, 0, 0], v_axis=[0, 0, 1],
              half_u=half_w + 0.3, half_v=hz, albedo=[0.85, 0.85, 0.8],
              texture=Texture("stripes", {"scale": 2.0, "axis": 1, "low": 0.35, "high": 1.0})),
        Plane(center=[0, -half_h, zc], u_axis=[0, 0, 1], v_axis=[1, 0, 0],
              half_u=hz, half_v=half_w + 0.3, albedo=[0.75, 0.75, 0.85],
              texture=Texture("waves", {"scale": 3.0, "low": 0.45, "high": 1.0})),
        Plane(center=[0, 0, length + 1.0], u_axis=[0, 1, 0], v_axis=[1, 0, 0],
              half_u=half_h + 0.3, half_v=half_w + 0.3, albedo=[0.6, 0.6, 0.6],
              texture=Texture("waves", {"scale": 6.0, "low": 0.55, "high": 0.75})),
    ]


def _corridor_lights(n_frames: int, brightness: float = 0.33):
    # static ceiling lights spaced along the corridor; no falloff, so keep the
    # per-light brightness low enough that summed radiance stays unsaturated
    return [
        Light.static([0.0, -0.9, z], brightness, n_frames)
        for z in (4.0, 14.0, 24.0, 34.0, 44.0)
    ]


def _intrinsics(size: int) -> Intrinsics:
    return Intrinsics(fx=float(size), fy=float(size), cx=(size - 1) / 2.0,
                      cy=(size - 1) / 2.0, width=size, height=size)


@_register
def corridor(n_frames: int = 48, size: int = 64, seed: int = 0, step: float = 0.3,
             noise_sigma: float = 0.0) -> SceneSpec:
    """Static corridor, static lights, constant exposure: the clean baseline."""
    return SceneSpec(
        surfaces=_corridor_surfaces(),
        lights=_corridor_lights(n_frames),
        camera_poses=_camera_track(n_frames, step),
        intrinsics=_intrinsics(size),
        exposures=np.ones(n_frames),
        noise_sigma=noise_sigma,
        seed=seed,
        name="corridor",
    )


@_register
def corridor_headlight(n_frames: int = 48, size: int = 64, seed: int = 0, step: float = 0.3,
                       exposure_amplitude: float = 0.3, headlight_brightness: float = 0.38,
                       noise_sigma: float = 0.0) -> SceneSpec:
    """Corridor with a camera-co-moving light and oscillating exposure.

    The exposure follows exp(a * sin(2 pi t / 7)); a period-7 schedule makes
    the frame-to-frame ratio grow with the pairing stride, so widening the
    triplet stride widens the photometric violation.
    """
    poses = _camera_track(n_frames, step)
    t_idx = np.arange(n_frames)
    exposures = np.exp(exposure_amplitude * np.sin(2 * np.pi * t_idx / 7.0))
    headlight = Light(
        positions=np.stack([p.translation + np.array([0.0, 0.35, 0.1]) for p in poses]),
        brightness=np.full(n_frames, headlight_brightness),
    )
    return SceneSpec(
        surfaces=_corridor_surfaces(),
        lights=_corridor_lights(n_frames, brightness=0.16) + [headlight],
        camera_poses=poses,
        intrinsics=_intrinsics(size),
        exposures=exposures,
        noise_sigma=noise_sigma,
        seed=seed,
        name="corridor_headlight",
    )


@_register
def corridor_mover(n_frames: int = 48, size: int = 64, seed: int = 0, step: float = 0.3,
                   mover_speed: float = 0.09, noise_sigma: float = 0.0) -> SceneSpec:
    """Corridor plus a sphere sliding across the camera path.

    The sphere swings laterally ahead of the camera; because it keeps pace with
    the camera along z it stays in view for the whole sequence.
    """
    surfaces = _corridor_surfaces()
    sphere = Sphere(center=[0.0, 0.35, 4.0], radius=0.55, albedo=[0.95, 0.55, 0.45],
                    texture=Texture("waves", {"scale": 0.8, "low": 0.5, "high": 1.0}))
    surfaces.append(sphere)
    mover_idx = len(surfaces) - 1
    motions = np.tile(np.eye(4), (n_frames, 1, 1))
    for t in range(n_frames):
        motions[t, 0, 3] = 0.85 * np.sin(2 * np.pi * (mover_speed * t) / 1.8)
        motions[t, 2, 3] = step * t  # keeps pace with the camera
    return SceneSpec(
        surfaces=surfaces,
        lights=_corridor_lights(n_frames),
        camera_poses=_camera_track(n_frames, step),
        intrinsics=_intrinsics(size),
        exposures=np.ones(n_frames),
        movers={mover_idx: motions},
        noise_sigma=noise_sigma,
        seed=seed,
        name="corridor_mover",
    )


@_register
def corridor_noisy(n_frames: int = 48, size: int = 64, seed: int = 0, step: float = 0.3,
                   noise_sigma: float = 25.0 / 255.0) -> SceneSpec:
    scene = corridor(n_frames=n_frames, size=size, seed=seed, step=step, noise_sigma=noise_sigma)
    scene.name = "corridor_noisy"
    return scene


def lateral_mover_fixture(size: int = 32, depth: float = 4.0, speed: float = 0.25,
                          n_frames: int = 3, seed: int = 0) -> SceneSpec:
    """Static camera watching a sphere translate parallel to the image plane.

    With a static camera the rigid correspondence is the identity, so the
    ground-truth residual on the sphere equals its image-space flow fx*v/d.
    """
    surfaces = [
        Plane(center=[0, 0, 12.0], u_axis=[0, 1, 0], v_axis=[1, 0, 0],
              half_u=8.0, half_v=8.0, albedo=[0.7, 0.7, 0.7],
              texture=Texture("waves", {"scale": 2.0, "low": 0.4, "high": 1.0})),
        Sphere(center=[0.0, 0.0, depth], radius=0.5, albedo=[0.9, 0.5, 0.4]),
    ]
    motions = np.tile(np.eye(4), (n_frames, 1, 1))
    for t in range(n_frames):
        motions[t, 0, 3] = speed * t
    return SceneSpec(
        surfaces=surfaces,
        lights=[Light.static([0.0, -2.0, 0.5], 0.7, n_frames)],
        camera_poses=[PoseSE3.identity() for _ in range(n_frames)],
        intrinsics=_intrinsics(size),
        exposures=np.ones(n_frames),
        movers={1: motions},
        seed=seed,
        name="lateral_mover",
    )


def build_preset(name: str, **kwargs) -> SceneSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown scene preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)
