"""Pinhole camera: world->camera transform, perspective projection, placement sampling.

World frame is Z-up. Camera frame follows the usual vision convention:
X right, Y down, Z forward (optical axis). Full perspective throughout;
weak perspective is deliberately not provided.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS_Z = 1e-6  # behind-camera depth cutoff, meters
WORLD_UP = np.array([0.0, 0.0, 1.0])

DIST_FORMAT = "synthpose-camera-distribution"

DEFAULT_INTRINSICS = {"fx": 900.0, "fy": 900.0, "cx": 960.0, "cy": 540.0,
                      "width": 1920, "height": 1080}


@dataclass(frozen=True)
class Camera:
    """World->camera rotation, camera center in world, pinhole intrinsics."""

    rotation: np.ndarray
    position: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        pos = np.asarray(self.position, dtype=np.float64)
        if rot.shape != (3, 3) or pos.shape != (3,):
            raise ValueError("rotation must be (3, 3) and position (3,)")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-8) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be a proper rotation matrix")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        rot.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "position": self.position.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        return cls(
            rotation=np.array(doc["rotation"], dtype=np.float64),
            position=np.array(doc["position"], dtype=np.float64),
            fx=float(doc["fx"]), fy=float(doc["fy"]),
            cx=float(doc["cx"]), cy=float(doc["cy"]),
            width=int(doc["width"]), height=int(doc["height"]),
        )


def world_to_cam(points: np.ndarray, cam: Camera) -> np.ndarray:
    """Map world points (..., 3) into the camera frame: R @ (X - position)."""
    points = np.asarray(points, dtype=np.float64)
    return (points - cam.position) @ cam.rotation.T


def project(points: np.ndarray, cam: Camera):
    """Perspective-project world points (N, 3).

    Returns (uv, in_frame, in_front): pixel coordinates (N, 2), an in-image
    flag, and an in-front-of-camera flag (depth > EPS_Z). Points behind the
    camera keep NaN pixels and must be excluded from any loss by the caller.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam_pts = world_to_cam(pts, cam)
    z = cam_pts[:, 2]
    in_front = z > EPS_Z
    uv = np.full((pts.shape[0], 2), np.nan)
    safe_z = np.where(in_front, z, 1.0)
    uv[:, 0] = np.where(in_front, cam.cx + cam.fx * cam_pts[:, 0] / safe_z, np.nan)
    uv[:, 1] = np.where(in_front, cam.cy + cam.fy * cam_pts[:, 1] / safe_z, np.nan)
    in_frame = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    return uv, in_frame, in_front


def look_at(position: np.ndarray, target: np.ndarray, intrinsics: dict | None = None) -> Camera:
    """Camera at `position` whose optical axis passes through `target`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise ValueError("camera position coincides with target")
    forward = forward / dist
    right = np.cross(forward, WORLD_UP)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        # looking straight up/down: pick an arbitrary horizontal right axis
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        norm = np.linalg.norm(right)
    right = right / norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    intr = dict(DEFAULT_INTRINSICS)
    if intrinsics:
        intr.update(intrinsics)
    return Camera(rotation=rotation, position=position, **intr)


@dataclass(frozen=True)
class FactorRange:
    """Weighted bins over one placement factor; sampling is uniform inside a bin."""

    bins: tuple[tuple[float, float, float], ...]  # (lo, hi, weight)

    def __post_init__(self):
        if not self.bins:
            raise ValueError("factor needs at least one bin")
        total = 0.0
        for lo, hi, w in self.bins:
            if hi < lo:
                raise ValueError(f"bin range empty: [{lo}, {hi}]")
            if w < 0:
                raise ValueError("bin weights must be nonnegative")
            total += w
        if total <= 0:
            raise ValueError("bin weights must sum to a positive value")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "FactorRange":
        return cls(bins=((float(lo), float(hi), 1.0),))

    def sample(self, rng: np.random.Generator) -> float:
        weights = np.array([w for _, _, w in self.bins])
        idx = int(rng.choice(len(self.bins), p=weights / weights.sum()))
        lo, hi, _ = self.bins[idx]
        return float(rng.uniform(lo, hi)) if hi > lo else lo


@dataclass(frozen=True)
class CameraDistribution:
    """Empirical placement distribution: yaw/elevation (rad), distance/height (m)."""

    yaw: FactorRange = field(default_factory=lambda: FactorRange.uniform(0.0, 2 * math.pi))
    elevation: FactorRange = field(
        default_factory=lambda: FactorRange.uniform(math.radians(-30), math.radians(60)))
    distance: FactorRange = field(default_factory=lambda: FactorRange.uniform(2.0, 6.0))
    height: FactorRange = field(default_factory=lambda: FactorRange.uniform(0.0, 0.0))
    intrinsics: dict = field(default_factory=lambda: dict(DEFAULT_INTRINSICS))


def default_distribution() -> CameraDistribution:
    return CameraDistribution()


def placement_offset(yaw: float, elevation: float, distance: float, height: float) -> np.ndarray:
    """Camera-center offset from the subject root for sampled placement factors."""
    ce = math.cos(elevation)
    return np.array([
        distance * ce * math.cos(yaw),
        distance * ce * math.sin(yaw),
        distance * math.sin(elevation) + height,
    ])


def sample_camera(dist: CameraDistribution, subject_root: np.ndarray, seed) -> Camera:
    """Place a camera on the sampled sphere around `subject_root`, looking at it.

    Deterministic per seed; `seed` may be an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    subject_root = np.asarray(subject_root, dtype=np.float64)
    yaw = dist.yaw.sample(rng)
    elevation = dist.elevation.sample(rng)
    distance = dist.distance.sample(rng)
    height = dist.height.sample(rng)
    position = subject_root + placement_offset(yaw, elevation, distance, height)
    return look_at(position, subject_root, dist.intrinsics)


def camera_factors(cam: Camera, subject_root: np.ndarray) -> tuple[float, float, float]:
    """Recover (yaw, elevation, distance) of a camera relative to a subject root."""
    rel = cam.position - np.asarray(subject_root, dtype=np.float64)
    distance = float(np.linalg.norm(rel))
    if distance < 1e-12:
        return 0.0, 0.0, 0.0
    elevation = math.asin(max(-1.0, min(1.0, rel[2] / distance)))
    yaw = math.atan2(rel[1], rel[0])
    return yaw, elevation, distance


def _range_to_doc(factor: FactorRange, angle: bool) -> list:
    scale = 180.0 / math.pi if angle else 1.0
    return [[lo * scale, hi * scale, w] for lo, hi, w in factor.bins]


def _range_from_doc(doc: list, angle: bool) -> FactorRange:
    scale = math.pi / 180.0 if angle else 1.0
    return FactorRange(bins=tuple((lo * scale, hi * scale, w) for lo, hi, w in doc))


def save_distribution(dist: CameraDistribution, path: str | Path) -> None:
    """Write a distribution file; angles are stored in degrees on disk."""
    doc = {
        "format": DIST_FORMAT,
        "version": 1,
        "yaw_deg": _range_to_doc(dist.yaw, angle=True),
        "elevation_deg": _range_to_doc(dist.elevation, angle=True),
        "distance_m": _range_to_doc(dist.distance, angle=False),
        "height_m": _range_to_doc(dist.height, angle=False),
        "intrinsics": dist.intrinsics,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_distribution(path: str | Path) -> CameraDistribution:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DIST_FORMAT:
        raise ValueError(f"{path}: not a {DIST_FORMAT} file")
    return CameraDistribution(
        yaw=_range_from_doc(doc["yaw_deg"], angle=True),
        elevation=_range_from_doc(doc["elevation_deg"], angle=True),
        distance=_range_from_doc(doc["distance_m"], angle=False),
        height=_range_from_doc(doc["height_m"], angle=False),
        intrinsics=dict(doc.get("intrinsics", DEFAULT_INTRINSICS)),
    )
