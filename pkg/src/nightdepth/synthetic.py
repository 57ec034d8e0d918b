"""Analytic diffuse-shading renderer over planes and spheres, with full ground truth.

Image formation follows a diffuse-only point-light model with per-frame
exposure: the pre-clamp intensity of a surface point p seen at frame t is

    radiance_c(p, t) = e_t * albedo_c(p) * [ k_a * B_a + sum_l B_l(t) * max(0, n(p) . L_l(p, t)) ]

where albedo includes a scalar procedural texture, so the per-pixel ratio of
two frames' pre-clamp intensities is channel-independent; that scalar ratio is
the ground-truth lighting change stored as `gt_ratio`.  Images are the
radiance clamped to [0, 1] (sensor saturation) plus optional seeded Gaussian
noise.  No specular term, no vignetting, no camera response curve, no shadow
rays and no distance falloff: brightness depends on light direction only.

Everything here is numpy and deliberately independent of the torch geometry
module, so the two act as cross-checking implementations of the same math.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, RenderError
from .geometry import Intrinsics, PoseSE3

FORMAT_VERSION = 1
_HIT_EPS = 1e-9


# --------------------------------------------------------------------------
# textures

@dataclass(frozen=True)
class Texture:
    """Scalar albedo modulation over surface-local (u, v) coordinates in meters.

    Kinds:
      constant: {"value": v}
      waves:    {"scale": meters per period, "low": lo, "high": hi}
                smooth product-of-sines pattern (band-limited, interpolation friendly)
      stripes:  {"scale": s, "axis": 0|1, "low": lo, "high": hi}
                smooth sinusoidal stripes along one axis
    """

    kind: str = "constant"
    params: dict = field(default_factory=dict)

    def evaluate(self, uv: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.full(uv.shape[:-1], p.get("value", 1.0))
        if self.kind == "waves":
            scale = p.get("scale", 1.0)
            lo, hi = p.get("low", 0.3), p.get("high", 1.0)
            w = 0.5 + 0.5 * np.sin(2 * np.pi * uv[..., 0] / scale) * np.sin(2 * np.pi * uv[..., 1] / scale)
            return lo + (hi - lo) * w
        if self.kind == "stripes":
            scale = p.get("scale", 1.0)
            axis = int(p.get("axis", 0))
            lo, hi = p.get("low", 0.3), p.get("high", 1.0)
            w = 0.5 + 0.5 * np.sin(2 * np.pi * uv[..., axis] / scale)
            return lo + (hi - lo) * w
        raise InputError(f"unknown texture kind {self.kind!r}")


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise InputError("zero-length direction")
    return v / n


# --------------------------------------------------------------------------
# surfaces

@dataclass
class Plane:
    """Finite textured rectangle: points center + a*u_axis + b*v_axis, |a| <= half_u, |b| <= half_v."""

    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    texture: Texture = field(default_factory=Texture)
    ambient_k: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.u_axis = _unit(self.u_axis)
        v = np.asarray(self.v_axis, dtype=np.float64)
        v = v - np.dot(v, self.u_axis) * self.u_axis  # keep the basis orthonormal
        self.v_axis = _unit(v)
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64), 0.0, 1.0)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    def intersect(self, origin, dirs):
        """Vectorized ray-rectangle intersection.

        Returns (t, hit_mask, normals, uv); t is inf where there is no hit.
        """
        n = self.normal
        denom = dirs @ n
        offset = np.dot(self.center - origin, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, offset / denom, np.inf)
        pts = origin + np.where(np.isfinite(t), t, 1.0)[..., None] * dirs
        local = pts - self.center
        a = local @ self.u_axis
        b = local @ self.v_axis
        hit = (t > _HIT_EPS) & np.isfinite(t) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        t = np.where(hit, t, np.inf)
        normals = np.broadcast_to(n, dirs.shape)
        return t, hit, normals, np.stack([a, b], axis=-1)

    def contains(self, point, tol=1e-9) -> bool:
        local = np.asarray(point, dtype=np.float64) - self.center
        return (
            abs(np.dot(local, self.normal)) < tol
            and abs(np.dot(local, self.u_axis)) <= self.half_u + tol
            and abs(np.dot(local, self.v_axis)) <= self.half_v + tol
        )


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    texture: Texture = field(default_factory=Texture)
    ambient_k: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise InputError("sphere radius must be positive")
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64), 0.0, 1.0)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * (dirs @ oc)
        c = np.dot(oc, oc) - self.radius ** 2
        disc = b * b - 4 * a * c
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sqrt_disc) / (2 * a)
        t1 = (-b + sqrt_disc) / (2 * a)
        t = np.where(t0 > _HIT_EPS, t0, t1)
        hit = (disc > 0) & (t > _HIT_EPS)
        t = np.where(hit, t, np.inf)
        pts = origin + np.where(hit, t, 1.0)[..., None] * dirs  # finite filler off-hit
        normals = (pts - self.center) / self.radius
        # longitude / latitude scaled by radius so texture scale stays metric
        lon = np.arctan2(normals[..., 0], normals[..., 2]) * self.radius
        lat = np.arcsin(np.clip(normals[..., 1], -1.0, 1.0)) * self.radius
        return t, hit, normals, np.stack([lon, lat], axis=-1)

    def contains(self, point, tol=1e-9) -> bool:
        return abs(np.linalg.norm(np.asarray(point) - self.center) - self.radius) < tol


# --------------------------------------------------------------------------
# scene description

@dataclass
class Light:
    """Point light with per-frame position and brightness (no distance falloff)."""

    positions: np.ndarray  # (n_frames, 3)
    brightness: np.ndarray  # (n_frames,)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.brightness = np.asarray(self.brightness, dtype=np.float64).reshape(-1)
        if len(self.positions) != len(self.brightness):
            raise InputError("light positions and brightness must cover the same frames")
        if (self.brightness < 0).any():
            raise InputError("light brightness must be non-negative")

    @classmethod
    def static(cls, position, brightness: float, n_frames: int) -> "Light":
        return cls(np.tile(np.asarray(position, dtype=np.float64), (n_frames, 1)),
                   np.full(n_frames, brightness))


@dataclass
class SceneSpec:
    """Complete recipe for a rendered sequence.

    `movers` maps a surface index to an (n_frames, 4, 4) stack of rigid
    transforms applied to that surface's base geometry at each frame.
    `ambient_brightness` is retained for completeness but defaults to zero,
    matching the diffuse-only shading model.
    """

    surfaces: list
    lights: list
    camera_poses: list  # cam-to-world PoseSE3 per frame
    intrinsics: Intrinsics
    exposures: np.ndarray
    movers: dict = field(default_factory=dict)
    noise_sigma: np.ndarray | float = 0.0
    ambient_brightness: float = 0.0
    seed: int = 0
    name: str = "scene"

    def __post_init__(self):
        if not self.surfaces or not self.lights:
            raise InputError("a scene needs at least one surface and one light")
        n = len(self.camera_poses)
        self.exposures = np.asarray(self.exposures, dtype=np.float64).reshape(-1)
        if len(self.exposures) != n:
            raise InputError("one exposure per frame required")
        if (self.exposures <= 0).any():
            raise InputError("exposures must be positive")
        if np.isscalar(self.noise_sigma):
            self.noise_sigma = np.full(n, float(self.noise_sigma))
        else:
            self.noise_sigma = np.asarray(self.noise_sigma, dtype=np.float64).reshape(-1)
            if len(self.noise_sigma) != n:
                raise InputError("one noise sigma per frame required")
        for light in self.lights:
            if len(light.brightness) != n:
                raise InputError("light schedules must cover every frame")
        self.movers = {int(k): np.asarray(v, dtype=np.float64).reshape(n, 4, 4)
                       for k, v in self.movers.items()}

    @property
    def n_frames(self) -> int:
        return len(self.camera_poses)

    def surface_transform(self, index: int, t: int) -> np.ndarray:
        if index in self.movers:
            return self.movers[index][t]
        return np.eye(4)


@dataclass
class RenderedFrame:
    image: np.ndarray          # H x W x 3 in [0, 1], noise included
    gt_depth: np.ndarray       # H x W z-depth (m); 0 where no surface was hit
    gt_pose: PoseSE3           # point transform camera_t -> camera_{t+1}
    gt_flow: np.ndarray        # H x W x 2 pixel motion to frame t+1
    gt_ratio: np.ndarray       # H x W pre-clamp intensity ratio frame t / frame t+1
    visibility: np.ndarray     # H x W: hit at t AND unoccluded, in-bounds at t+1
    radiance: np.ndarray       # H x W x 3 pre-clamp, pre-noise intensities
    radiance_next: np.ndarray  # same surface points shaded at frame t+1

    @property
    def saturation_mask(self) -> np.ndarray:
        """Pixels whose pre-clamp intensity exceeds the sensor range in either frame."""
        return (self.radiance.max(axis=-1) > 1.0) | (self.radiance_next.max(axis=-1) > 1.0)


# --------------------------------------------------------------------------
# rendering

def _intersect_scene(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, t_frame: int):
    """Nearest-hit query against every surface at its frame-t placement."""
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    best_idx = np.full(shape, -1, dtype=np.int64)
    best_normal = np.zeros(dirs.shape)
    best_uv = np.zeros(shape + (2,))
    for i, surf in enumerate(scene.surfaces):
        m = scene.surface_transform(i, t_frame)
        rot, trans = m[:3, :3], m[:3, 3]
        # intersect in the surface's base frame
        o_local = rot.T @ (origin - trans)
        d_local = dirs @ rot
        t, hit, normals, uv = surf.intersect(o_local, d_local)
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)
        world_normals = normals @ rot.T
        best_normal = np.where(closer[..., None], world_normals, best_normal)
        best_uv = np.where(closer[..., None], uv, best_uv)
    return best_t, best_idx, best_normal, best_uv


def _light_factor(scene: SceneSpec, points: np.ndarray, normals: np.ndarray, t: int) -> np.ndarray:
    """Channel-neutral shading sum: k_a*B_a + sum_l B_l(t) max(0, n . L_l)."""
    acc = np.zeros(points.shape[:-1])
    for light in scene.lights:
        to_light = light.positions[t] - points
        dist = np.linalg.norm(to_light, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            l_hat = to_light / np.where(dist > 1e-12, dist, 1.0)[..., None]
        acc = acc + light.brightness[t] * np.maximum(0.0, np.sum(normals * l_hat, axis=-1))
    return acc


def _check_camera_not_embedded(scene: SceneSpec, origin: np.ndarray, t: int):
    for i, surf in enumerate(scene.surfaces):
        m = scene.surface_transform(i, t)
        local = m[:3, :3].T @ (origin - m[:3, 3])
        if surf.contains(local, tol=1e-9):
            raise RenderError(f"camera origin lies on surface {i} at frame {t}")


def add_noise(image: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Adds seeded zero-mean Gaussian noise and clamps back to [0, 1]."""
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


def render(scene: SceneSpec, t: int) -> RenderedFrame:
    """Renders frame t and its ground truth against frame t+1.

    For the final frame (no successor) the forward-looking ground truth is
    rendered against the frame itself (identity pose, unit ratio).
    """
    if not 0 <= t < scene.n_frames:
        raise InputError(f"frame index {t} out of range")
    t_next = min(t + 1, scene.n_frames - 1)
    intr = scene.intrinsics
    h, w = intr.height, intr.width

    cam_t = scene.camera_poses[t]
    cam_next = scene.camera_poses[t_next]
    origin = cam_t.translation
    _check_camera_not_embedded(scene, origin, t)

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1)
    dirs_world = dirs_cam @ cam_t.rotation.T

    # dirs have z_cam = 1, so the ray parameter IS the z-depth
    depth, idx, normals, uv = _intersect_scene(scene, origin, dirs_world, t)
    hit = idx >= 0
    depth = np.where(hit, depth, 0.0)
    points = origin + depth[..., None] * dirs_world

    # per-pixel albedo = surface albedo * scalar texture
    albedo = np.zeros((h, w, 3))
    ambient_k = np.zeros((h, w))
    for i, surf in enumerate(scene.surfaces):
        sel = idx == i
        if not sel.any():
            continue
        tex = surf.texture.evaluate(uv[sel])
        albedo[sel] = surf.albedo * tex[..., None]
        ambient_k[sel] = surf.ambient_k

    factor_t = ambient_k * scene.ambient_brightness + _light_factor(scene, points, normals, t)
    radiance = scene.exposures[t] * albedo * factor_t[..., None]
    radiance[~hit] = 0.0

    # track each surface point into frame t+1 (movers carry their points along)
    points_next = points.copy()
    normals_next = normals.copy()
    for i in scene.movers:
        sel = idx == i
        if not sel.any():
            continue
        m_t = scene.surface_transform(i, t)
        m_next = scene.surface_transform(i, t_next)
        rel = m_next @ np.linalg.inv(m_t)
        points_next[sel] = points[sel] @ rel[:3, :3].T + rel[:3, 3]
        normals_next[sel] = normals[sel] @ rel[:3, :3].T

    factor_next = ambient_k * scene.ambient_brightness + _light_factor(scene, points_next, normals_next, t_next)
    radiance_next = scene.exposures[t_next] * albedo * factor_next[..., None]
    radiance_next[~hit] = 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        num = scene.exposures[t] * factor_t
        den = scene.exposures[t_next] * factor_next
        gt_ratio = np.where(den > 1e-12, num / den, 0.0)
    gt_ratio[~hit] = 0.0

    # flow: project the (possibly moved) points into camera t+1
    p_cam_next = (points_next - cam_next.translation) @ cam_next.rotation
    z_next = p_cam_next[..., 2]
    in_front = z_next > 1e-9
    z_safe = np.where(in_front, z_next, 1.0)
    px = intr.fx * p_cam_next[..., 0] / z_safe + intr.cx
    py = intr.fy * p_cam_next[..., 1] / z_safe + intr.cy
    gt_flow = np.stack([px - us, py - vs], axis=-1)
    gt_flow[~(hit & in_front)] = 0.0

    in_bounds = (np.rint(px) >= 0) & (np.rint(px) <= w - 1) & (np.rint(py) >= 0) & (np.rint(py) <= h - 1)

    # occlusion: march from the next camera toward each point; the segment must be clear
    seg = points_next - cam_next.translation
    t_near, _, _, _ = _intersect_scene(scene, cam_next.translation, seg, t_next)
    unoccluded = t_near > 1.0 - 1e-6
    visibility = hit & in_front & in_bounds & unoccluded

    image = np.clip(radiance, 0.0, 1.0)
    sigma = float(scene.noise_sigma[t])
    if sigma > 0:
        image = add_noise(image, sigma, seed=[scene.seed, t])

    gt_pose = cam_next.inverse().compose(cam_t)
    return RenderedFrame(
        image=image,
        gt_depth=depth,
        gt_pose=gt_pose,
        gt_flow=gt_flow,
        gt_ratio=gt_ratio,
        visibility=visibility,
        radiance=radiance,
        radiance_next=radiance_next,
    )


def gt_correspondence(scene: SceneSpec, t: int):
    """Ground-truth flow, rigid reprojection and their residual for frame t.

    The rigid correspondence V is computed here with the plain numpy pinhole
    pipeline (independent of the torch geometry module).  The residual
    (u + flow) - V is zero on static pixels and nonzero exactly where surface
    motion breaks the rigid-scene model.
    """
    frame = render(scene, t)
    intr = scene.intrinsics
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))

    x_n = (us - intr.cx) / intr.fx
    y_n = (vs - intr.cy) / intr.fy
    cam = np.stack([x_n * frame.gt_depth, y_n * frame.gt_depth, frame.gt_depth], axis=-1)
    moved = cam @ frame.gt_pose.rotation.T + frame.gt_pose.translation
    z = np.where(moved[..., 2] > 1e-9, moved[..., 2], 1.0)
    vx = intr.fx * moved[..., 0] / z + intr.cx
    vy = intr.fy * moved[..., 1] / z + intr.cy
    rigid = np.stack([vx, vy], axis=-1)

    target = np.stack([us, vs], axis=-1) + frame.gt_flow
    residual = target - rigid
    residual[~frame.visibility] = 0.0
    return frame.gt_flow, rigid, residual


# --------------------------------------------------------------------------
# serialization

def _pose_to_list(p: PoseSE3):
    return p.matrix().tolist()


def scene_to_dict(scene: SceneSpec) -> dict:
    surfaces = []
    for s in scene.surfaces:
        entry = {
            "albedo": s.albedo.tolist(),
            "texture": {"kind": s.texture.kind, "params": s.texture.params},
            "ambient_k": s.ambient_k,
        }
        if isinstance(s, Plane):
            entry.update(
                type="plane",
                center=s.center.tolist(),
                u_axis=s.u_axis.tolist(),
                v_axis=s.v_axis.tolist(),
                half_u=s.half_u,
                half_v=s.half_v,
            )
        elif isinstance(s, Sphere):
            entry.update(type="sphere", center=s.center.tolist(), radius=s.radius)
        else:
            raise InputError(f"unsupported surface type {type(s).__name__}")
        surfaces.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "name": scene.name,
        "surfaces": surfaces,
        "lights": [
            {"positions": l.positions.tolist(), "brightness": l.brightness.tolist()}
            for l in scene.lights
        ],
        "camera_poses": [_pose_to_list(p) for p in scene.camera_poses],
        "intrinsics": dataclasses.asdict(scene.intrinsics),
        "exposures": scene.exposures.tolist(),
        "movers": {str(k): v.tolist() for k, v in scene.movers.items()},
        "noise_sigma": np.asarray(scene.noise_sigma).tolist(),
        "ambient_brightness": scene.ambient_brightness,
        "seed": scene.seed,
    }


def scene_from_dict(data: dict) -> SceneSpec:
    if data.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported scene format version {data.get('format_version')}")
    surfaces = []
    for s in data["surfaces"]:
        tex = Texture(kind=s["texture"]["kind"], params=s["texture"]["params"])
        common = dict(albedo=np.array(s["albedo"]), texture=tex, ambient_k=s.get("ambient_k", 0.0))
        if s["type"] == "plane":
            surfaces.append(
                Plane(center=s["center"], u_axis=s["u_axis"], v_axis=s["v_axis"],
                      half_u=s["half_u"], half_v=s["half_v"], **common)
            )
        elif s["type"] == "sphere":
            surfaces.append(Sphere(center=s["center"], radius=s["radius"], **common))
        else:
            raise InputError(f"unknown surface type {s['type']!r}")
    return SceneSpec(
        surfaces=surfaces,
        lights=[Light(np.array(l["positions"]), np.array(l["brightness"])) for l in data["lights"]],
        camera_poses=[PoseSE3.from_matrix(np.array(m)) for m in data["camera_poses"]],
        intrinsics=Intrinsics(**data["intrinsics"]),
        exposures=np.array(data["exposures"]),
        movers={int(k): np.array(v) for k, v in data.get("movers", {}).items()},
        noise_sigma=np.array(data.get("noise_sigma", 0.0)),
        ambient_brightness=data.get("ambient_brightness", 0.0),
        seed=data.get("seed", 0),
        name=data.get("name", "scene"),
    )


def save_scene(scene: SceneSpec, path):
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2))


def load_scene(path) -> SceneSpec:
    return scene_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# dataset export

def render_dataset(scene: SceneSpec, out_dir) -> dict:
    """Renders every frame to disk: 16-bit PNGs, per-frame ground-truth .npz
    files and a manifest.json tying them together.  Returns the manifest."""
    from .imgio import write_image

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)

    scene_blob = json.dumps(scene_to_dict(scene), sort_keys=True).encode()
    frames = []
    for t in range(scene.n_frames):
        frame = render(scene, t)
        image_rel = f"frames/frame_{t:05d}.png"
        gt_rel = f"gt/frame_{t:05d}.npz"
        write_image(out / image_rel, frame.image)
        np.savez_compressed(
            out / gt_rel,
            depth=frame.gt_depth.astype(np.float32),
            flow=frame.gt_flow.astype(np.float32),
            ratio=frame.gt_ratio.astype(np.float32),
            visibility=frame.visibility,
            pose_next=frame.gt_pose.matrix(),
            cam_to_world=scene.camera_poses[t].matrix(),
            exposure=scene.exposures[t],
        )
        frames.append(
            {
                "frame_id": f"{scene.name}/{t:05d}",
                "index": t,
                "timestamp": float(t),
                "image": image_rel,
                "gt": gt_rel,
                "position": scene.camera_poses[t].translation.tolist(),
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": scene.name,
        "n_frames": scene.n_frames,
        "width": scene.intrinsics.width,
        "height": scene.intrinsics.height,
        "intrinsics": dataclasses.asdict(scene.intrinsics),
        "seed": scene.seed,
        "scene_sha256": hashlib.sha256(scene_blob).hexdigest(),
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    save_scene(scene, out / "scene.json")
    return manifest


def load_dataset_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    data = json.loads(path.read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported dataset format version {data.get('format_version')}")
    return data
