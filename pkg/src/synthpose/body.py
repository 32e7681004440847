"""Parametric kinematic body: shape-dependent joint regression and forward kinematics.

The model is keypoint-level only: a rooted joint hierarchy whose parent-relative
offsets are linear in 10 shape coefficients, posed by per-joint axis-angle
rotations. No mesh, no vertex skinning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_SHAPE_COEFFS = 10
MAX_ABS_BETA = 5.0
TWO_PI = 2.0 * math.pi

# Fixed affine weights for the two interpolated keypoints (declared convention;
# both lie on the neck->head line).
HEAD_TOP_FACTOR = 1.3
NOSE_FACTOR = 0.65
EXTRA_KEYPOINT_NAMES = ("head_top", "nose")

TREE_FORMAT = "synthpose-tree"


@dataclass(frozen=True)
class KinematicTree:
    """Rooted joint hierarchy with shape-linear rest offsets.

    parents[i] is the parent joint of joint i+1 (the root, joint 0, has none)
    and must satisfy parents[i] <= i so joints are topologically ordered.
    rest_offsets[j] is joint j's offset from its parent in the rest pose
    (for the root: its rest position), in meters. shape_blend[j] maps the
    10 shape coefficients to an additive offset correction, meters per unit.
    """

    parents: np.ndarray
    rest_offsets: np.ndarray
    shape_blend: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        rest = np.asarray(self.rest_offsets, dtype=np.float64)
        blend = np.asarray(self.shape_blend, dtype=np.float64)
        j = rest.shape[0]
        if rest.shape != (j, 3):
            raise ValueError(f"rest_offsets must be (J, 3), got {rest.shape}")
        if parents.shape != (j - 1,):
            raise ValueError(f"parents must have J-1={j - 1} entries, got {parents.shape}")
        if blend.shape != (j, 3, NUM_SHAPE_COEFFS):
            raise ValueError(f"shape_blend must be (J, 3, {NUM_SHAPE_COEFFS}), got {blend.shape}")
        if len(self.names) != j:
            raise ValueError("names length must equal joint count")
        for i, p in enumerate(parents):
            if not 0 <= p <= i:
                raise ValueError(f"parents must be topologically ordered; parents[{i}]={p}")
        lengths = np.linalg.norm(rest[1:], axis=1)
        if not np.all(lengths > 0):
            raise ValueError("rest bone lengths must be strictly positive")
        if not (np.all(np.isfinite(rest)) and np.all(np.isfinite(blend))):
            raise ValueError("tree arrays must be finite")
        for arr, name in ((parents, "parents"), (rest, "rest_offsets"), (blend, "shape_blend")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def joint_count(self) -> int:
        return self.rest_offsets.shape[0]

    def parent_of(self, joint: int) -> int:
        """Parent index, or -1 for the root."""
        return -1 if joint == 0 else int(self.parents[joint - 1])

    def children_of(self, joint: int) -> list[int]:
        return [i + 1 for i, p in enumerate(self.parents) if p == joint]

    def incident_bones(self, joint: int) -> frozenset[int]:
        """Bones touching a joint, identified by their child-joint index."""
        bones = set(self.children_of(joint))
        if joint > 0:
            bones.add(joint)
        return frozenset(bones)


@dataclass(frozen=True)
class PoseParams:
    """Per-joint axis-angle rotations, (J, 3) radians.

    Canonicalized on construction so every joint's rotation norm is < 2*pi,
    which removes winding ambiguity in temporal smoothing distances.
    """

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim == 1:
            if theta.size % 3 != 0:
                raise ValueError("flat theta length must be a multiple of 3")
            theta = theta.reshape(-1, 3)
        if theta.ndim != 2 or theta.shape[1] != 3:
            raise ValueError(f"theta must be (J, 3), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta = canonicalize_axis_angle(theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def joint_count(self) -> int:
        return self.theta.shape[0]

    def flat(self) -> np.ndarray:
        return self.theta.reshape(-1)


@dataclass(frozen=True)
class ShapeParams:
    """Dimensionless shape coefficients, length 10, each within [-5, 5]."""

    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_SHAPE_COEFFS))

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (NUM_SHAPE_COEFFS,):
            raise ValueError(f"beta must have shape ({NUM_SHAPE_COEFFS},), got {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if np.any(np.abs(beta) > MAX_ABS_BETA):
            raise ValueError(f"|beta_i| must be <= {MAX_ABS_BETA}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class Translation:
    """World-frame root translation, meters."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"t must have shape (3,), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("t must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)


def canonicalize_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap axis-angle vectors so their norm is < 2*pi (rotation unchanged)."""
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1, 3)
    norms = np.linalg.norm(flat, axis=1)
    big = norms >= TWO_PI
    if np.any(big):
        wrapped = np.mod(norms[big], TWO_PI)
        flat[big] *= (wrapped / norms[big])[:, None]
    return flat.reshape(theta.shape)


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle vector (3,) to rotation matrix (3, 3); zero maps to identity."""
    return rodrigues_batch(np.asarray(aa, dtype=np.float64).reshape(1, 3))[0]


def rodrigues_batch(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula over a batch: (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    if aa.shape[-1] != 3:
        raise ValueError("axis-angle vectors must have 3 components")
    if not np.all(np.isfinite(aa)):
        raise ValueError("axis-angle input must be finite")
    shape = aa.shape[:-1]
    v = aa.reshape(-1, 3)
    theta = np.linalg.norm(v, axis=1)
    out = np.broadcast_to(np.eye(3), (v.shape[0], 3, 3)).copy()
    nz = theta > 0.0
    if np.any(nz):
        axis = v[nz] / theta[nz, None]
        k = _skew_batch(axis)
        s = np.sin(theta[nz])[:, None, None]
        c = (1.0 - np.cos(theta[nz]))[:, None, None]
        out[nz] = np.eye(3) + s * k + c * (k @ k)
    return out.reshape(*shape, 3, 3)


def _skew_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    k = np.zeros((n, 3, 3))
    k[:, 0, 1] = -v[:, 2]
    k[:, 0, 2] = v[:, 1]
    k[:, 1, 0] = v[:, 2]
    k[:, 1, 2] = -v[:, 0]
    k[:, 2, 0] = -v[:, 1]
    k[:, 2, 1] = v[:, 0]
    return k


def rotation_geodesic(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Geodesic angle(s) between rotation matrices (..., 3, 3), in radians.

    Uses the atan2 of the skew and trace parts of the relative rotation,
    which stays accurate where acos of the trace loses precision.
    """
    rel = np.swapaxes(np.asarray(r1), -1, -2) @ np.asarray(r2)
    trace = rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2]
    vee = 0.5 * np.stack([
        rel[..., 2, 1] - rel[..., 1, 2],
        rel[..., 0, 2] - rel[..., 2, 0],
        rel[..., 1, 0] - rel[..., 0, 1],
    ], axis=-1)
    sin_t = np.linalg.norm(vee, axis=-1)
    cos_t = (trace - 1.0) / 2.0
    return np.arctan2(sin_t, cos_t)


def rotation_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues: proper rotation (3, 3) -> axis-angle (3,)."""
    rot = np.asarray(rot, dtype=np.float64)
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    vee = 0.5 * np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin_t = np.linalg.norm(vee)
    angle = math.atan2(sin_t, cos_t)
    if angle < 1e-12:
        return np.zeros(3)
    if sin_t > 1e-7:
        return vee / sin_t * angle
    # angle near pi: axis from the symmetric part
    m = (rot + np.eye(3)) / 2.0
    axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
    # fix signs using the largest component
    i = int(np.argmax(axis))
    if axis[i] > 0:
        axis = axis / axis[i]
        axis[(i + 1) % 3] = m[i, (i + 1) % 3] / axis[i] if axis[i] else axis[(i + 1) % 3]
        axis[(i + 2) % 3] = m[i, (i + 2) % 3] / axis[i] if axis[i] else axis[(i + 2) % 3]
    axis = axis / np.linalg.norm(axis)
    return axis * angle


def _as_beta(beta) -> np.ndarray:
    if isinstance(beta, ShapeParams):
        return beta.beta
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (NUM_SHAPE_COEFFS,):
        raise ValueError(f"beta must have {NUM_SHAPE_COEFFS} entries, got shape {beta.shape}")
    return beta


def _as_theta(theta, joint_count: int) -> np.ndarray:
    if isinstance(theta, PoseParams):
        theta = theta.theta
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta.reshape(-1, 3)
    if theta.shape != (joint_count, 3):
        raise ValueError(f"theta must be ({joint_count}, 3), got {theta.shape}")
    return theta


def _as_translation(t) -> np.ndarray:
    if isinstance(t, Translation):
        return t.t
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (3,):
        raise ValueError(f"translation must have shape (3,), got {t.shape}")
    return t


def joint_regress(beta, tree: KinematicTree) -> np.ndarray:
    """Canonical (rest-pose) joint positions (J, 3) for shape coefficients beta.

    Joint i accumulates (rest_offsets + shape_blend @ beta) along its ancestor
    chain; affine in beta by construction.
    """
    beta = _as_beta(beta)
    offsets = tree.rest_offsets + tree.shape_blend @ beta
    joints = np.empty_like(offsets)
    joints[0] = offsets[0]
    for j in range(1, tree.joint_count):
        joints[j] = joints[tree.parents[j - 1]] + offsets[j]
    return joints


def forward_kinematics(theta, beta, t, tree: KinematicTree) -> np.ndarray:
    """World-frame 3D keypoints (J, 3) for pose theta, shape beta, translation t.

    Each joint's global rotation composes its parent's with its own local
    rotation; its position rotates the parent-relative rest offset by the
    parent's global rotation, so per-bone lengths match joint_regress(beta)
    exactly. The root is additionally translated by t.
    """
    theta = _as_theta(theta, tree.joint_count)
    beta = _as_beta(beta)
    t = _as_translation(t)
    offsets = tree.rest_offsets + tree.shape_blend @ beta
    rots = rodrigues_batch(theta)
    g_rot = np.empty((tree.joint_count, 3, 3))
    pos = np.empty((tree.joint_count, 3))
    g_rot[0] = rots[0]
    pos[0] = offsets[0]
    for j in range(1, tree.joint_count):
        p = tree.parents[j - 1]
        pos[j] = pos[p] + g_rot[p] @ offsets[j]
        g_rot[j] = g_rot[p] @ rots[j]
    return pos + t


def augmentation_matrix(tree: KinematicTree) -> np.ndarray:
    """(J+2, J) affine map from native joints to the augmented keypoint set.

    Rows 0..J-1 are the identity; the two appended rows produce head_top and
    nose as fixed affine combinations of the head and neck joints (weights sum
    to one, so the map commutes with rigid motions).
    """
    names = tree.names
    for required in ("head", "neck"):
        if required not in names:
            raise ValueError(f"tree has no joint named '{required}'")
    head = names.index("head")
    neck = names.index("neck")
    j = tree.joint_count
    mat = np.zeros((j + 2, j))
    mat[:j] = np.eye(j)
    mat[j, head] = 1.0 + HEAD_TOP_FACTOR
    mat[j, neck] = -HEAD_TOP_FACTOR
    mat[j + 1, head] = 1.0 + NOSE_FACTOR
    mat[j + 1, neck] = -NOSE_FACTOR
    return mat


def derive_extra_keypoints(x3d: np.ndarray, tree: KinematicTree) -> np.ndarray:
    """Append the two interpolated keypoints (head_top, nose) to (J, 3) keypoints."""
    x3d = np.asarray(x3d, dtype=np.float64)
    if x3d.shape != (tree.joint_count, 3):
        raise ValueError(f"expected ({tree.joint_count}, 3) keypoints, got {x3d.shape}")
    return augmentation_matrix(tree) @ x3d


def keypoint_names(tree: KinematicTree) -> tuple[str, ...]:
    return tree.names + EXTRA_KEYPOINT_NAMES


def save_tree(tree: KinematicTree, path: str | Path) -> None:
    doc = {
        "format": TREE_FORMAT,
        "version": 1,
        "joint_count": tree.joint_count,
        "names": list(tree.names),
        "parents": tree.parents.tolist(),
        "rest_offsets": tree.rest_offsets.tolist(),
        "shape_blend": tree.shape_blend.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_tree(path: str | Path) -> KinematicTree:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != TREE_FORMAT:
        raise ValueError(f"{path}: not a {TREE_FORMAT} file")
    tree = KinematicTree(
        parents=np.array(doc["parents"], dtype=np.int64),
        rest_offsets=np.array(doc["rest_offsets"], dtype=np.float64),
        shape_blend=np.array(doc["shape_blend"], dtype=np.float64),
        names=tuple(doc["names"]),
    )
    if tree.joint_count != doc["joint_count"]:
        raise ValueError(f"{path}: joint_count header disagrees with arrays")
    return tree


# Default 24-joint tree. Topology follows the usual parametric-body joint
# hierarchy; offsets are hand-picked plausible values in meters (Z up,
# +Y facing forward, +X to the subject's left).
_DEFAULT_JOINTS = [
    # name, parent, offset (m)
    ("pelvis", -1, (0.0, 0.0, 0.95)),
    ("left_hip", 0, (0.09, 0.0, -0.06)),
    ("right_hip", 0, (-0.09, 0.0, -0.06)),
    ("spine1", 0, (0.0, -0.01, 0.11)),
    ("left_knee", 1, (0.015, 0.0, -0.38)),
    ("right_knee", 2, (-0.015, 0.0, -0.38)),
    ("spine2", 3, (0.0, 0.005, 0.12)),
    ("left_ankle", 4, (-0.01, -0.02, -0.40)),
    ("right_ankle", 5, (0.01, -0.02, -0.40)),
    ("spine3", 6, (0.0, 0.005, 0.06)),
    ("left_foot", 7, (0.02, 0.11, -0.05)),
    ("right_foot", 8, (-0.02, 0.11, -0.05)),
    ("neck", 9, (0.0, -0.01, 0.21)),
    ("left_collar", 9, (0.07, -0.01, 0.12)),
    ("right_collar", 9, (-0.07, -0.01, 0.12)),
    ("head", 12, (0.0, 0.01, 0.07)),
    ("left_shoulder", 13, (0.10, 0.0, 0.02)),
    ("right_shoulder", 14, (-0.10, 0.0, 0.02)),
    ("left_elbow", 16, (0.26, 0.0, -0.01)),
    ("right_elbow", 17, (-0.26, 0.0, -0.01)),
    ("left_wrist", 18, (0.25, 0.0, 0.0)),
    ("right_wrist", 19, (-0.25, 0.0, 0.0)),
    ("left_hand", 20, (0.08, 0.0, 0.0)),
    ("right_hand", 21, (-0.08, 0.0, 0.0)),
]

_LEG_JOINTS = (1, 2, 4, 5, 7, 8, 10, 11)
_ARM_JOINTS = (13, 14, 16, 17, 18, 19, 20, 21, 22, 23)
_TORSO_JOINTS = (3, 6, 9, 12, 15)
_WIDTH_JOINTS = (1, 2, 16, 17)


def default_tree() -> KinematicTree:
    """The built-in 24-joint tree with a deterministic shape basis."""
    names = tuple(name for name, _, _ in _DEFAULT_JOINTS)
    parents = np.array([p for _, p, _ in _DEFAULT_JOINTS[1:]], dtype=np.int64)
    rest = np.array([off for _, _, off in _DEFAULT_JOINTS], dtype=np.float64)
    j = len(names)
    blend = np.zeros((j, 3, NUM_SHAPE_COEFFS))
    blend[:, :, 0] = 0.05 * rest                      # overall size
    blend[list(_LEG_JOINTS), :, 1] = 0.04 * rest[list(_LEG_JOINTS)]
    blend[list(_ARM_JOINTS), :, 2] = 0.04 * rest[list(_ARM_JOINTS)]
    blend[list(_TORSO_JOINTS), :, 3] = 0.03 * rest[list(_TORSO_JOINTS)]
    for idx in _WIDTH_JOINTS:
        blend[idx, 0, 4] = 0.012 * np.sign(rest[idx, 0])
    # remaining columns: small fixed pseudo-random basis so all 10 coefficients
    # move the keypoints independently
    rng = np.random.default_rng(171_450_001)
    blend[:, :, 5:] = rng.uniform(-0.003, 0.003, size=(j, 3, 5))
    return KinematicTree(parents=parents, rest_offsets=rest, shape_blend=blend, names=names)


def toy_chain_tree(joint_count: int = 4, bone_length: float = 0.3) -> KinematicTree:
    """A straight chain of joints for tests; includes neck/head names at the end."""
    if joint_count < 3:
        raise ValueError("toy chain needs at least 3 joints for neck/head labels")
    parents = np.arange(joint_count - 1, dtype=np.int64)
    rest = np.zeros((joint_count, 3))
    rest[1:, 2] = bone_length
    rng = np.random.default_rng(99)
    blend = rng.uniform(-0.01, 0.01, size=(joint_count, 3, NUM_SHAPE_COEFFS))
    names = tuple(
        ["root"]
        + [f"seg{i}" for i in range(1, joint_count - 2)]
        + ["neck", "head"]
    )
    return KinematicTree(parents=parents, rest_offsets=rest, shape_blend=blend, names=names)
