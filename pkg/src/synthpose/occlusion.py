"""Ray-cast joint visibility labeling against scene primitives and body capsules.

Every joint gets exactly one of three labels per frame: Visible, Occluded
(first hit on the camera->joint ray belongs to the environment) or
SelfOccluded (first hit is one of the subject's own bone capsules). Linear
scans over primitives are adequate at desk scale; no BVH.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .body import KinematicTree
from .camera import Camera

EPS_HIT = 1e-3   # hit must be at least this far in front of the joint (m)
_DIR_TOL = 1e-9

SCENE_FORMAT = "synthpose-scene"

DEFAULT_BONE_RADIUS = 0.05


class OcclusionLabel(Enum):
    VISIBLE = "visible"
    OCCLUDED = "occluded"
    SELF_OCCLUDED = "self_occluded"


@dataclass(frozen=True)
class Primitive:
    """Sphere, axis-aligned box or capsule; owner None means environment,
    otherwise the subject bone's child-joint index."""

    shape: str  # "sphere" | "box" | "capsule"
    params: tuple
    owner: int | None = None

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "capsule"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")

    @classmethod
    def sphere(cls, center, radius: float, owner: int | None = None) -> "Primitive":
        center = np.asarray(center, dtype=np.float64)
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        return cls("sphere", (tuple(center), float(radius)), owner)

    @classmethod
    def box(cls, vmin, vmax, owner: int | None = None) -> "Primitive":
        vmin = np.asarray(vmin, dtype=np.float64)
        vmax = np.asarray(vmax, dtype=np.float64)
        if not np.all(vmin < vmax):
            raise ValueError("box min must be strictly below max componentwise")
        return cls("box", (tuple(vmin), tuple(vmax)), owner)

    @classmethod
    def capsule(cls, p0, p1, radius: float, owner: int | None = None) -> "Primitive":
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        if radius <= 0:
            raise ValueError("capsule radius must be positive")
        if np.array_equal(p0, p1):
            raise ValueError("capsule endpoints must differ")
        return cls("capsule", (tuple(p0), tuple(p1), float(radius)), owner)

    def to_dict(self) -> dict:
        doc = {"shape": self.shape, "params": [list(p) if isinstance(p, tuple) else p
                                               for p in self.params]}
        if self.owner is not None:
            doc["owner_bone"] = self.owner
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Primitive":
        shape = doc["shape"]
        params = doc["params"]
        owner = doc.get("owner_bone")
        if shape == "sphere":
            return cls.sphere(params[0], params[1], owner)
        if shape == "box":
            return cls.box(params[0], params[1], owner)
        if shape == "capsule":
            return cls.capsule(params[0], params[1], params[2], owner)
        raise ValueError(f"unknown primitive shape {shape!r}")


def _hit_sphere(origin, direction, center, radius):
    oc = origin - center
    b = float(oc @ direction)
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    t = -b - sq
    if t > 0:
        return t
    t = -b + sq
    return t if t > 0 else None


def _hit_box(origin, direction, vmin, vmax):
    t_near, t_far = -math.inf, math.inf
    for axis in range(3):
        d = direction[axis]
        o = origin[axis]
        if abs(d) < 1e-15:
            if o < vmin[axis] or o > vmax[axis]:
                return None
            continue
        t1 = (vmin[axis] - o) / d
        t2 = (vmax[axis] - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
    if t_near > t_far or t_far <= 0:
        return None
    return t_near if t_near > 0 else t_far


def _hit_capsule(origin, direction, p0, p1, radius):
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    u = axis / length
    w = origin - p0
    best = None
    # cylindrical body: quadratic in the plane orthogonal to the axis
    d_perp = direction - (direction @ u) * u
    w_perp = w - (w @ u) * u
    a = float(d_perp @ d_perp)
    if a > 1e-15:
        b = float(d_perp @ w_perp)
        c = float(w_perp @ w_perp) - radius * radius
        disc = b * b - a * c
        if disc >= 0:
            sq = math.sqrt(disc)
            for t in ((-b - sq) / a, (-b + sq) / a):
                if t > 0:
                    s = float((w + t * direction) @ u)
                    if 0.0 <= s <= length:
                        best = t if best is None else min(best, t)
    # end caps
    for cap in (p0, p1):
        t = _hit_sphere(origin, direction, cap, radius)
        if t is not None and (best is None or t < best):
            best = t
    return best


def _hit_primitive(origin, direction, prim: Primitive):
    if prim.shape == "sphere":
        center, radius = prim.params
        return _hit_sphere(origin, direction, np.asarray(center), radius)
    if prim.shape == "box":
        vmin, vmax = prim.params
        return _hit_box(origin, direction, vmin, vmax)
    p0, p1, radius = prim.params
    return _hit_capsule(origin, direction, np.asarray(p0), np.asarray(p1), radius)


def ray_cast(origin: np.ndarray, direction: np.ndarray, primitives) -> tuple[int, float] | None:
    """Nearest positive-distance intersection over `primitives`, or None.

    `direction` must be a unit vector (within 1e-9). Returns (index, distance).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > _DIR_TOL:
        raise ValueError("ray direction must be a unit vector")
    best_idx, best_t = -1, math.inf
    for idx, prim in enumerate(primitives):
        t = _hit_primitive(origin, direction, prim)
        if t is not None and t < best_t:
            best_idx, best_t = idx, t
    if best_idx < 0:
        return None
    return best_idx, best_t


def body_capsules(x3d: np.ndarray, tree: KinematicTree, radii=None) -> list[Primitive]:
    """One capsule per parent-child bone of the posed skeleton.

    `radii` may be a scalar, a per-bone dict keyed by child-joint name, or
    None for the default radius. Coincident joints degrade to a sphere of the
    same radius.
    """
    x3d = np.asarray(x3d, dtype=np.float64)
    capsules = []
    for child in range(1, tree.joint_count):
        parent = tree.parent_of(child)
        if isinstance(radii, dict):
            radius = float(radii.get(tree.names[child], DEFAULT_BONE_RADIUS))
        elif radii is None:
            radius = DEFAULT_BONE_RADIUS
        else:
            radius = float(radii)
        p0, p1 = x3d[parent], x3d[child]
        if np.array_equal(p0, p1):
            capsules.append(Primitive.sphere(p0, radius, owner=child))
        else:
            capsules.append(Primitive.capsule(p0, p1, radius, owner=child))
    return capsules


def classify_point(point: np.ndarray, cam: Camera, env, capsules,
                   exclude_bones: frozenset[int] = frozenset()) -> OcclusionLabel:
    """Label one keypoint by casting the camera->point ray.

    Capsules whose bone index is in `exclude_bones` are transparent to this
    point (joints lie on their own capsule axes). A hit counts only if it lies
    strictly in front of the point (closer than distance - EPS_HIT). Ties at
    identical distance resolve to Occluded, which keeps the result independent
    of primitive ordering.
    """
    point = np.asarray(point, dtype=np.float64)
    rel = point - cam.position
    dist = float(np.linalg.norm(rel))
    if dist < 1e-12:
        return OcclusionLabel.VISIBLE
    direction = rel / dist
    cutoff = dist - EPS_HIT

    env_hit = ray_cast(cam.position, direction, env)
    body = [c for c in capsules if c.owner not in exclude_bones]
    body_hit = ray_cast(cam.position, direction, body)

    env_t = env_hit[1] if env_hit is not None and env_hit[1] < cutoff else math.inf
    body_t = body_hit[1] if body_hit is not None and body_hit[1] < cutoff else math.inf
    if env_t is math.inf and body_t is math.inf:
        return OcclusionLabel.VISIBLE
    return OcclusionLabel.OCCLUDED if env_t <= body_t else OcclusionLabel.SELF_OCCLUDED


def classify_joint(joint: int, x3d: np.ndarray, cam: Camera, env,
                   capsules) -> OcclusionLabel:
    """Label joint `joint` of posed keypoints (J, 3); bones incident to the
    joint are excluded from self-occlusion (the caller filters behind-camera
    joints)."""
    x3d = np.asarray(x3d, dtype=np.float64)
    exclude = incident_bone_owners(x3d[joint], capsules)
    return classify_point(x3d[joint], cam, env, capsules, exclude_bones=exclude)


def incident_bone_owners(joint_pos: np.ndarray, capsules) -> frozenset[int]:
    """Owners of capsules with an endpoint exactly at `joint_pos`.

    body_capsules places endpoints at the exact joint positions, so incidence
    reduces to endpoint equality.
    """
    pos = tuple(np.asarray(joint_pos, dtype=np.float64))
    owners = set()
    for cap in capsules:
        if cap.owner is None:
            continue
        if cap.shape == "capsule":
            p0, p1, _ = cap.params
            if pos == p0 or pos == p1:
                owners.add(cap.owner)
        elif pos == cap.params[0]:  # degenerate bone stored as a sphere
            owners.add(cap.owner)
    return frozenset(owners)


def save_scene(primitives, path: str | Path) -> None:
    doc = {
        "format": SCENE_FORMAT,
        "version": 1,
        "primitives": [p.to_dict() for p in primitives],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_scene(path: str | Path) -> list[Primitive]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"{path}: not a {SCENE_FORMAT} file")
    return [Primitive.from_dict(d) for d in doc["primitives"]]


def default_scene() -> list[Primitive]:
    """A few props near the world origin; sparse enough to stay benign."""
    return [
        Primitive.box((2.2, 1.2, 0.0), (2.8, 1.8, 2.2)),
        Primitive.sphere((-3.0, 2.0, 1.0), 0.6),
        Primitive.capsule((1.5, -2.5, 0.0), (1.5, -2.5, 2.5), 0.25),
    ]
