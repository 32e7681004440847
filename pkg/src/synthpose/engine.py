"""Mock scene/motion engine: randomized scenarios and ground-truth-labeled sequences.

Stands in for the game engine. Scenario generation samples scene attributes
from catalogs; sequence synthesis runs the body model forward per frame,
projects keypoints, and labels joint visibility. Everything is deterministic
given the scenario seed, so distinct sequences can be produced by any number
of workers in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import body as body_mod
from .body import KinematicTree, augmentation_matrix, forward_kinematics, keypoint_names
from .camera import Camera, CameraDistribution, project, sample_camera
from .occlusion import (
    OcclusionLabel,
    Primitive,
    body_capsules,
    classify_point,
    incident_bone_owners,
)

FPS = 30
MIN_CLIP_FRAMES = 30
MAX_CLIP_FRAMES = 80
MAX_FRAME_ROTATION_STEP = np.pi / 2  # sanity bound on per-joint motion

WEATHER_TAGS = ("clear", "overcast", "rain", "fog", "snow", "storm")

SEQUENCE_FORMAT = "synthpose-sequence"
SPEC_FORMAT = "synthpose-scenario"
SUBJECTS_FORMAT = "synthpose-subjects"
ACTIONS_FORMAT = "synthpose-actions"

_LOCATION_RANGE = ((-50.0, -50.0, 0.0), (50.0, 50.0, 0.0))

_LABEL_CODES = {OcclusionLabel.VISIBLE: 0, OcclusionLabel.OCCLUDED: 1,
                OcclusionLabel.SELF_OCCLUDED: 2}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


@dataclass(frozen=True)
class ScenarioSpec:
    """Randomized scene attributes for one sequence; seeds are fixed at creation."""

    sequence_id: str
    subject_id: int
    action_id: int
    location: tuple[float, float, float]
    camera_seed: int
    weather: str
    time_of_day: float  # hours, [0, 24)
    seed: int

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "sequence_id": self.sequence_id,
            "subject_id": self.subject_id,
            "action_id": self.action_id,
            "location": list(self.location),
            "camera_seed": self.camera_seed,
            "weather": self.weather,
            "time_of_day": self.time_of_day,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        return cls(
            sequence_id=doc["sequence_id"],
            subject_id=int(doc["subject_id"]),
            action_id=int(doc["action_id"]),
            location=tuple(float(v) for v in doc["location"]),
            camera_seed=int(doc["camera_seed"]),
            weather=doc["weather"],
            time_of_day=float(doc["time_of_day"]),
            seed=int(doc["seed"]),
        )


@dataclass(frozen=True)
class MotionClip:
    """A pose sequence: per-frame axis-angle rotations plus a root trajectory."""

    name: str
    thetas: np.ndarray      # (T, J, 3)
    root_traj: np.ndarray   # (T, 3), translation offsets starting near zero
    fps: int = FPS

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=np.float64)
        traj = np.asarray(self.root_traj, dtype=np.float64)
        t = thetas.shape[0]
        if not MIN_CLIP_FRAMES <= t <= MAX_CLIP_FRAMES:
            raise ValueError(f"clip length must be within [{MIN_CLIP_FRAMES}, {MAX_CLIP_FRAMES}], got {t}")
        if thetas.ndim != 3 or thetas.shape[2] != 3:
            raise ValueError("thetas must be (T, J, 3)")
        if traj.shape != (t, 3):
            raise ValueError("root_traj must be (T, 3)")
        # sanity: consecutive per-joint rotation change below a quarter turn
        steps = body_mod.rotation_geodesic(
            body_mod.rodrigues_batch(thetas[:-1]), body_mod.rodrigues_batch(thetas[1:]))
        if steps.size and steps.max() >= MAX_FRAME_ROTATION_STEP:
            raise ValueError("consecutive per-joint rotation change exceeds pi/2")
        thetas.setflags(write=False)
        traj.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "root_traj", traj)

    @property
    def frames(self) -> int:
        return self.thetas.shape[0]


@dataclass(frozen=True)
class SubjectCatalog:
    names: tuple[str, ...]
    betas: np.ndarray  # (N, 10)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 2 or betas.shape[1] != body_mod.NUM_SHAPE_COEFFS:
            raise ValueError("betas must be (N, 10)")
        if betas.shape[0] == 0:
            raise ValueError("subject catalog is empty")
        if len(self.names) != betas.shape[0]:
            raise ValueError("names and betas disagree")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return self.betas.shape[0]


@dataclass(frozen=True)
class ActionCatalog:
    clips: tuple[MotionClip, ...]

    def __post_init__(self):
        if not self.clips:
            raise ValueError("action catalog is empty")
        object.__setattr__(self, "clips", tuple(self.clips))

    def __len__(self):
        return len(self.clips)


@dataclass(frozen=True)
class GroundTruth:
    beta: np.ndarray    # (10,)
    thetas: np.ndarray  # (T, J, 3)
    trans: np.ndarray   # (T, 3)


@dataclass(frozen=True)
class SequenceData:
    """One video-sequence unit: keypoints, projections, visibility, camera, GT."""

    spec: ScenarioSpec
    camera: Camera
    keypoint_names: tuple[str, ...]
    x3d: np.ndarray        # (T, K, 3) meters
    x2d: np.ndarray        # (T, K, 2) pixels (NaN behind camera)
    in_frame: np.ndarray   # (T, K) bool
    in_front: np.ndarray   # (T, K) bool
    occlusion: np.ndarray  # (T, K) int8 codes, see occlusion_labels()
    ground_truth: GroundTruth | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        t, k = self.x3d.shape[:2]
        for name in ("x2d", "in_frame", "in_front", "occlusion"):
            arr = getattr(self, name)
            if arr.shape[0] != t or arr.shape[1] != k:
                raise ValueError(f"{name} length disagrees with x3d")
        if len(self.keypoint_names) != k:
            raise ValueError("keypoint_names length disagrees with x3d")

    @property
    def frames(self) -> int:
        return self.x3d.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.x3d.shape[1]

    def occlusion_labels(self, t: int) -> list[OcclusionLabel]:
        return [_CODE_LABELS[int(c)] for c in self.occlusion[t]]


# ---------------------------------------------------------------------------
# catalogs
# ---------------------------------------------------------------------------

def default_subjects(count: int = 20, seed: int = 7_170_001) -> SubjectCatalog:
    """Named shape vectors sampled in [-2, 2]."""
    rng = np.random.default_rng(seed)
    betas = rng.uniform(-2.0, 2.0, size=(count, body_mod.NUM_SHAPE_COEFFS))
    names = tuple(f"subject_{i:03d}" for i in range(count))
    return SubjectCatalog(names=names, betas=betas)


def _sinusoid_angles(rng, frames, amplitude):
    t = np.arange(frames) / FPS
    freqs = rng.uniform(0.2, 0.8, 2)
    phases = rng.uniform(0, 2 * np.pi, 2)
    amps = amplitude * rng.uniform(0.3, 1.0, 2)
    return amps[0] * np.sin(2 * np.pi * freqs[0] * t + phases[0]) + \
        amps[1] * np.sin(2 * np.pi * freqs[1] * t + phases[1])


# per-joint amplitude profile for the default 24-joint tree: proximal joints
# swing, distal joints stay calm (whipping short terminal bones is neither
# realistic nor smoothable)
_AMPLITUDE_24 = np.array([
    0.10,            # pelvis orientation sway
    0.30, 0.30,      # hips
    0.12,            # spine1
    0.30, 0.30,      # knees
    0.12,            # spine2
    0.12, 0.12,      # ankles
    0.10,            # spine3
    0.07, 0.07,      # feet
    0.12,            # neck
    0.10, 0.10,      # collars
    0.12,            # head
    0.30, 0.30,      # shoulders
    0.30, 0.30,      # elbows
    0.12, 0.12,      # wrists
    0.07, 0.07,      # hands
])


def procedural_clip(name: str, joint_count: int, rng: np.random.Generator,
                    frames: int | None = None) -> MotionClip:
    """Smooth multi-joint motion: per-joint sums of low-frequency sinusoids."""
    if frames is None:
        frames = int(rng.integers(MIN_CLIP_FRAMES, MAX_CLIP_FRAMES + 1))
    if joint_count == _AMPLITUDE_24.size:
        amplitudes = _AMPLITUDE_24
    else:
        amplitudes = np.full(joint_count, 0.25)
        amplitudes[0] = 0.12
    thetas = np.zeros((frames, joint_count, 3))
    for j in range(joint_count):
        for axis in range(3):
            if rng.uniform() < 0.55:
                thetas[:, j, axis] = _sinusoid_angles(rng, frames, amplitudes[j])
    # gentle drift so the analyser's speed gate always sees movement
    speed = rng.uniform(0.3, 0.9)
    heading = rng.uniform(0, 2 * np.pi)
    t = np.arange(frames) / FPS
    traj = np.stack([
        speed * t * np.cos(heading),
        speed * t * np.sin(heading),
        0.02 * np.sin(2 * np.pi * 0.5 * t),
    ], axis=1)
    return MotionClip(name=name, thetas=thetas, root_traj=traj)


def walk_clip(frames: int = 60) -> MotionClip:
    """Hand-authored walk for the default 24-joint tree."""
    t = np.arange(frames) / FPS
    phase = 2 * np.pi * 1.0 * t
    thetas = np.zeros((frames, 24, 3))
    swing = 0.40 * np.sin(phase)
    thetas[:, 1, 0] = swing          # left hip about x
    thetas[:, 2, 0] = -swing         # right hip antiphase
    thetas[:, 4, 0] = 0.35 * (1 + np.sin(phase - 0.6)) / 2   # knees bend forward
    thetas[:, 5, 0] = 0.35 * (1 + np.sin(phase + np.pi - 0.6)) / 2
    thetas[:, 16, 1] = 0.25 * np.sin(phase + np.pi)  # arms counterswing
    thetas[:, 17, 1] = 0.25 * np.sin(phase)
    thetas[:, 18, 0] = 0.2 + 0.1 * np.sin(phase + np.pi)
    thetas[:, 19, 0] = 0.2 + 0.1 * np.sin(phase)
    traj = np.stack([np.zeros(frames), 1.1 * t, 0.015 * np.sin(2 * phase)], axis=1)
    return MotionClip(name="walk", thetas=thetas, root_traj=traj)


def squat_clip(frames: int = 48) -> MotionClip:
    """Hand-authored squat for the default 24-joint tree."""
    t = np.arange(frames) / FPS
    cycle = (1 - np.cos(2 * np.pi * 0.7 * t)) / 2  # 0..1..0 bend amount
    thetas = np.zeros((frames, 24, 3))
    thetas[:, 1, 0] = -0.9 * cycle
    thetas[:, 2, 0] = -0.9 * cycle
    thetas[:, 4, 0] = 1.3 * cycle
    thetas[:, 5, 0] = 1.3 * cycle
    thetas[:, 3, 0] = 0.35 * cycle   # lean the spine forward
    thetas[:, 16, 2] = -0.6 * cycle  # arms forward for balance
    thetas[:, 17, 2] = 0.6 * cycle
    traj = np.stack([0.05 * np.sin(2 * np.pi * 0.2 * t), 0.05 * t, -0.28 * cycle], axis=1)
    return MotionClip(name="squat", thetas=thetas, root_traj=traj)


def default_actions(joint_count: int = 24, count: int = 20, seed: int = 9_040_113,
                    frames: int | None = None) -> ActionCatalog:
    """Procedural clips plus the hand-authored walk/squat (24-joint trees only)."""
    rng = np.random.default_rng(seed)
    clips = []
    if joint_count == 24 and frames is None:
        clips.extend([walk_clip(), squat_clip()][:count])
    while len(clips) < count:
        clips.append(procedural_clip(f"motion_{len(clips):03d}", joint_count, rng, frames))
    return ActionCatalog(clips=tuple(clips))


def save_subjects(catalog: SubjectCatalog, path: str | Path) -> None:
    doc = {"format": SUBJECTS_FORMAT, "version": 1,
           "subjects": [{"name": n, "beta": b.tolist()}
                        for n, b in zip(catalog.names, catalog.betas)]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_subjects(path: str | Path) -> SubjectCatalog:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SUBJECTS_FORMAT:
        raise ValueError(f"{path}: not a {SUBJECTS_FORMAT} file")
    entries = doc["subjects"]
    return SubjectCatalog(
        names=tuple(e["name"] for e in entries),
        betas=np.array([e["beta"] for e in entries], dtype=np.float64),
    )


def save_actions(catalog: ActionCatalog, path: str | Path) -> None:
    doc = {"format": ACTIONS_FORMAT, "version": 1,
           "clips": [{"name": c.name, "fps": c.fps, "thetas": c.thetas.tolist(),
                      "root_traj": c.root_traj.tolist()} for c in catalog.clips]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_actions(path: str | Path) -> ActionCatalog:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ACTIONS_FORMAT:
        raise ValueError(f"{path}: not a {ACTIONS_FORMAT} file")
    clips = tuple(
        MotionClip(name=c["name"], fps=int(c.get("fps", FPS)),
                   thetas=np.array(c["thetas"], dtype=np.float64),
                   root_traj=np.array(c["root_traj"], dtype=np.float64))
        for c in doc["clips"])
    return ActionCatalog(clips=clips)


# ---------------------------------------------------------------------------
# scenario generation
# ---------------------------------------------------------------------------

def generate_scenario(seed: int, subjects: SubjectCatalog, actions: ActionCatalog,
                      sequence_id: str | None = None) -> ScenarioSpec:
    """Sample one scenario; all attributes drawn independently, fixed per seed."""
    if len(subjects) == 0 or len(actions) == 0:
        raise ValueError("catalogs must be nonempty")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(_LOCATION_RANGE[0]), np.array(_LOCATION_RANGE[1])
    location = tuple(float(v) for v in rng.uniform(lo, hi))
    return ScenarioSpec(
        sequence_id=sequence_id if sequence_id is not None else f"seq_{seed:08x}",
        subject_id=int(rng.integers(len(subjects))),
        action_id=int(rng.integers(len(actions))),
        location=location,
        camera_seed=int(rng.integers(2**31 - 1)),
        weather=WEATHER_TAGS[int(rng.integers(len(WEATHER_TAGS)))],
        time_of_day=float(rng.uniform(0.0, 24.0)),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# sequence synthesis
# ---------------------------------------------------------------------------

def synthesize_sequence(spec: ScenarioSpec, tree: KinematicTree, scene,
                        subjects: SubjectCatalog, actions: ActionCatalog,
                        camera_dist: CameraDistribution, radii=None) -> SequenceData:
    """Run the forward model for one scenario and label every keypoint.

    The subject's shape comes from the catalog, poses and root motion from the
    action clip translated to the scenario location. The camera is sampled
    once per sequence (aimed at the mean pelvis position) and held fixed.
    Behind-camera keypoints are labeled Occluded; the 2D loss mask comes from
    the in_front flags.
    """
    if not 0 <= spec.subject_id < len(subjects):
        raise ValueError(f"subject_id {spec.subject_id} outside catalog")
    if not 0 <= spec.action_id < len(actions):
        raise ValueError(f"action_id {spec.action_id} outside catalog")
    beta = subjects.betas[spec.subject_id]
    clip = actions.clips[spec.action_id]
    if clip.thetas.shape[1] != tree.joint_count:
        raise ValueError("clip joint count disagrees with tree")

    frames = clip.frames
    location = np.array(spec.location)
    trans = location + clip.root_traj
    aug = augmentation_matrix(tree)
    k = tree.joint_count + 2

    native = np.empty((frames, tree.joint_count, 3))
    for t in range(frames):
        native[t] = forward_kinematics(clip.thetas[t], beta, trans[t], tree)
    x3d = np.einsum("kj,tjc->tkc", aug, native)

    camera = sample_camera(camera_dist, native[:, 0].mean(axis=0), spec.camera_seed)

    x2d = np.empty((frames, k, 2))
    in_frame = np.empty((frames, k), dtype=bool)
    in_front = np.empty((frames, k), dtype=bool)
    occ = np.empty((frames, k), dtype=np.int8)
    head = tree.names.index("head")
    for t in range(frames):
        x2d[t], in_frame[t], in_front[t] = project(x3d[t], camera)
        capsules = body_capsules(native[t], tree, radii)
        for kp in range(k):
            if not in_front[t, kp]:
                occ[t, kp] = _LABEL_CODES[OcclusionLabel.OCCLUDED]
                continue
            if kp < tree.joint_count:
                exclude = incident_bone_owners(native[t, kp], capsules)
            else:
                # derived points sit on the neck-head axis: anchor to the head
                exclude = incident_bone_owners(native[t, head], capsules)
            label = classify_point(x3d[t, kp], camera, scene, capsules, exclude)
            occ[t, kp] = _LABEL_CODES[label]

    return SequenceData(
        spec=spec,
        camera=camera,
        keypoint_names=keypoint_names(tree),
        x3d=x3d,
        x2d=x2d,
        in_frame=in_frame,
        in_front=in_front,
        occlusion=occ,
        ground_truth=GroundTruth(beta=beta.copy(), thetas=clip.thetas.copy(),
                                 trans=trans),
        noise_sigma=0.0,
    )


def add_noise(seq: SequenceData, sigma: float, seed: int) -> SequenceData:
    """Perturb 3D keypoints with i.i.d. Gaussian noise and re-project the 2D set.

    Ground truth and occlusion labels are retained from the clean sequence.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return seq
    rng = np.random.default_rng(seed)
    x3d = seq.x3d + rng.normal(scale=sigma, size=seq.x3d.shape)
    frames, k = x3d.shape[:2]
    x2d = np.empty((frames, k, 2))
    in_frame = np.empty((frames, k), dtype=bool)
    in_front = np.empty((frames, k), dtype=bool)
    for t in range(frames):
        x2d[t], in_frame[t], in_front[t] = project(x3d[t], seq.camera)
    return replace(seq, x3d=x3d, x2d=x2d, in_frame=in_frame, in_front=in_front,
                   noise_sigma=float(sigma))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def sequence_to_dict(seq: SequenceData) -> dict:
    doc = {
        "format": SEQUENCE_FORMAT,
        "version": 1,
        "spec": seq.spec.to_dict(),
        "camera": seq.camera.to_dict(),
        "keypoint_names": list(seq.keypoint_names),
        "noise_sigma": seq.noise_sigma,
        "x3d": seq.x3d.tolist(),
        "x2d": _nan_to_none(seq.x2d),
        "in_frame": seq.in_frame.tolist(),
        "in_front": seq.in_front.tolist(),
        "occlusion": seq.occlusion.tolist(),
    }
    if seq.ground_truth is not None:
        doc["ground_truth"] = {
            "beta": seq.ground_truth.beta.tolist(),
            "thetas": seq.ground_truth.thetas.tolist(),
            "trans": seq.ground_truth.trans.tolist(),
        }
    return doc


def sequence_from_dict(doc: dict) -> SequenceData:
    if doc.get("format") != SEQUENCE_FORMAT:
        raise ValueError(f"not a {SEQUENCE_FORMAT} document")
    gt = None
    if "ground_truth" in doc:
        g = doc["ground_truth"]
        gt = GroundTruth(beta=np.array(g["beta"]), thetas=np.array(g["thetas"]),
                         trans=np.array(g["trans"]))
    return SequenceData(
        spec=ScenarioSpec.from_dict(doc["spec"]),
        camera=Camera.from_dict(doc["camera"]),
        keypoint_names=tuple(doc["keypoint_names"]),
        x3d=np.array(doc["x3d"], dtype=np.float64),
        x2d=_none_to_nan(doc["x2d"]),
        in_frame=np.array(doc["in_frame"], dtype=bool),
        in_front=np.array(doc["in_front"], dtype=bool),
        occlusion=np.array(doc["occlusion"], dtype=np.int8),
        ground_truth=gt,
        noise_sigma=float(doc.get("noise_sigma", 0.0)),
    )


def save_sequence(seq: SequenceData, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sequence_to_dict(seq), sort_keys=True))


def load_sequence(path: str | Path) -> SequenceData:
    return sequence_from_dict(json.loads(Path(path).read_text()))


def save_specs(specs, path: str | Path) -> None:
    """Scenario spec file: one JSON record per line."""
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")


def load_specs(path: str | Path) -> list[ScenarioSpec]:
    specs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                specs.append(ScenarioSpec.from_dict(json.loads(line)))
    return specs


def _nan_to_none(arr: np.ndarray):
    out = arr.tolist()
    for row in out:
        for kp in row:
            for i, v in enumerate(kp):
                if v != v:  # NaN
                    kp[i] = None
    return out


def _none_to_nan(nested) -> np.ndarray:
    arr = np.array(
        [[[np.nan if v is None else v for v in kp] for kp in row] for row in nested],
        dtype=np.float64,
    )
    return arr
