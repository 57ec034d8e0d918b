"""Split construction: keyframe filtering, triplet building, cropping,
geographic partitioning and the split manifest file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .geometry import Intrinsics

MANIFEST_VERSION = 1


@dataclass
class FrameRecord:
    frame_id: str
    timestamp: float
    image_path: str
    position: np.ndarray  # 2D or 3D location in meters
    gt_depth_path: str | None = None

    def __post_init__(self):
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class Triplet:
    center: str
    prev: str
    next: str
    stride: int

    def members(self):
        return (self.prev, self.center, self.next)


@dataclass(frozen=True)
class Region:
    """Axis-aligned region over frame positions; None means unbounded.

    Intervals are half-open [lo, hi) so adjacent regions are disjoint."""

    name: str
    x_range: tuple | None = None
    y_range: tuple | None = None
    z_range: tuple | None = None

    def _ranges(self):
        return (self.x_range, self.y_range, self.z_range)

    def contains(self, position) -> bool:
        p = np.asarray(position, dtype=np.float64).reshape(-1)
        for axis, rng in enumerate(self._ranges()):
            if rng is None:
                continue
            value = p[axis] if axis < len(p) else 0.0
            if not rng[0] <= value < rng[1]:
                return False
        return True

    def overlaps(self, other: "Region") -> bool:
        for a, b in zip(self._ranges(), other._ranges()):
            if a is None or b is None:
                continue  # unbounded axis cannot separate them
            if a[1] <= b[0] or b[1] <= a[0]:
                return False
        return True


@dataclass
class SplitManifest:
    name: str
    triplets: list
    region: Region | None = None
    provenance: dict = field(default_factory=dict)

    def triplet_ids(self) -> set:
        return {t.center for t in self.triplets}


def frames_from_dataset(manifest: dict, dataset_dir) -> list:
    """Builds FrameRecords from a rendered-dataset manifest (see synthetic)."""
    root = Path(dataset_dir)
    records = [
        FrameRecord(
            frame_id=f["frame_id"],
            timestamp=float(f["timestamp"]),
            image_path=str(root / f["image"]),
            position=np.array(f["position"], dtype=np.float64),
            gt_depth_path=str(root / f["gt"]),
        )
        for f in manifest["frames"]
    ]
    times = [r.timestamp for r in records]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InputError("frame timestamps must be strictly increasing")
    return records


def keyframe_filter(frames: list, min_sep: float) -> list:
    """Greedy forward scan: keep a frame iff it is at least `min_sep` meters
    from the last kept frame (inclusive); the first frame is always kept."""
    if min_sep <= 0:
        raise InputError("min_sep must be positive")
    for f in frames:
        if f.position is None:
            raise InputError(f"frame {f.frame_id} has no position")
    kept = []
    last = None
    for f in frames:
        if last is None or np.linalg.norm(f.position - last) >= min_sep:
            kept.append(f.frame_id)
            last = f.position
    return kept


def build_triplets(keyframes: list, frames: list, stride: int = 1) -> list:
    """One triplet per keyframe, with neighbours at +/- `stride` raw-frame
    offsets; keyframes missing either neighbour are dropped."""
    if stride < 1:
        raise InputError("stride must be >= 1")
    index = {f.frame_id: i for i, f in enumerate(frames)}
    triplets = []
    for kf in keyframes:
        if kf not in index:
            raise InputError(f"keyframe {kf} not present in frame list")
        i = index[kf]
        if i - stride < 0 or i + stride >= len(frames):
            continue
        triplets.append(
            Triplet(center=kf, prev=frames[i - stride].frame_id,
                    next=frames[i + stride].frame_id, stride=stride)
        )
    return triplets


def mean_parallax(triplets: list, frames_by_id: dict) -> float:
    """Average |position(next) - position(prev)| over triplets, in meters."""
    if not triplets:
        return 0.0
    dists = [
        np.linalg.norm(frames_by_id[t.next].position - frames_by_id[t.prev].position)
        for t in triplets
    ]
    return float(np.mean(dists))


def crop_and_adjust(image: np.ndarray, intr: Intrinsics, bottom_fraction: float):
    """Removes the bottom fraction of the image.  The crop keeps the top-left
    origin, so fx, fy, cx, cy are untouched; only the height changes."""
    if not 0.0 <= bottom_fraction < 1.0:
        raise ConfigurationError(f"bottom_fraction must be in [0, 1), got {bottom_fraction}")
    new_h = math.floor(image.shape[0] * (1.0 - bottom_fraction))
    return image[:new_h], intr.with_size(intr.width, new_h)


def geographic_split(triplets: list, frames_by_id: dict, regions: list) -> list:
    """Assigns each triplet to the region containing its center keyframe.

    Triplets with any member outside the center's region are dropped entirely
    (strictest leakage prevention).  Overlapping region definitions are a
    configuration error; the output manifests are verified disjoint."""
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if a.overlaps(b):
                raise ConfigurationError(f"regions {a.name!r} and {b.name!r} overlap")
    manifests = [SplitManifest(name=r.name, triplets=[], region=r) for r in regions]
    for t in triplets:
        center_pos = frames_by_id[t.center].position
        for m in manifests:
            if m.region.contains(center_pos):
                if all(m.region.contains(frames_by_id[mid].position) for mid in t.members()):
                    m.triplets.append(t)
                break
    ids = [m.triplet_ids() for m in manifests]
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if a & b:
                raise ConfigurationError(f"split leakage: {sorted(a & b)[:3]} appear in two splits")
    return manifests


# --------------------------------------------------------------------------
# manifest file format

def save_manifest(manifest: SplitManifest, path):
    region = None
    if manifest.region is not None:
        region = {
            "name": manifest.region.name,
            "x_range": list(manifest.region.x_range) if manifest.region.x_range else None,
            "y_range": list(manifest.region.y_range) if manifest.region.y_range else None,
            "z_range": list(manifest.region.z_range) if manifest.region.z_range else None,
        }
    data = {
        "format_version": MANIFEST_VERSION,
        "name": manifest.name,
        "region": region,
        "provenance": manifest.provenance,
        "triplets": [
            {"center": t.center, "prev": t.prev, "next": t.next, "stride": t.stride}
            for t in manifest.triplets
        ],
    }
    Path(path).write_text(json.dumps(data, indent=2))


def load_manifest(path) -> SplitManifest:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != MANIFEST_VERSION:
        raise InputError(f"unsupported manifest version {data.get('format_version')}")
    region = None
    if data.get("region"):
        r = data["region"]
        region = Region(
            name=r["name"],
            x_range=tuple(r["x_range"]) if r.get("x_range") else None,
            y_range=tuple(r["y_range"]) if r.get("y_range") else None,
            z_range=tuple(r["z_range"]) if r.get("z_range") else None,
        )
    return SplitManifest(
        name=data["name"],
        triplets=[Triplet(**t) for t in data["triplets"]],
        region=region,
        provenance=data.get("provenance", {}),
    )
