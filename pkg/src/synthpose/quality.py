"""Quality gate: rejects stationary, severely occluded, or out-of-view sequences.

All three checks are independent and purely a function of the sequence and the
thresholds. The paper-side filters have no published cutoffs, so the defaults
here are declared conventions and every one is config-overridable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .engine import SequenceData


class QualityIssue(Enum):
    STATIONARY = "stationary"
    SEVERE_OCCLUSION = "severe_occlusion"
    OUT_OF_VIEW = "out_of_view"


@dataclass(frozen=True)
class Thresholds:
    min_mean_speed: float = 0.005      # m/frame
    max_occluded_fraction: float = 0.6
    max_out_of_frame_fraction: float = 0.3

    def __post_init__(self):
        if self.min_mean_speed < 0:
            raise ValueError("min_mean_speed must be nonnegative")
        for frac in (self.max_occluded_fraction, self.max_out_of_frame_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("fraction thresholds must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "min_mean_speed": self.min_mean_speed,
            "max_occluded_fraction": self.max_occluded_fraction,
            "max_out_of_frame_fraction": self.max_out_of_frame_fraction,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Thresholds":
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class QualityReport:
    passed: bool
    reasons: frozenset[QualityIssue]
    mean_speed: float            # m/frame
    occluded_fraction: float
    out_of_frame_fraction: float

    def __post_init__(self):
        if self.passed != (len(self.reasons) == 0):
            raise ValueError("passed must hold exactly when reasons is empty")

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reasons": sorted(r.value for r in self.reasons),
            "mean_speed": self.mean_speed,
            "occluded_fraction": self.occluded_fraction,
            "out_of_frame_fraction": self.out_of_frame_fraction,
        }


def joint_speed(x3d: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-frame mean joint speed and the sequence mean, in m/frame.

    speed_t averages the per-joint displacement between frames t-1 and t.
    """
    x3d = np.asarray(x3d, dtype=np.float64)
    if x3d.ndim != 3 or x3d.shape[0] < 2:
        raise ValueError("joint_speed needs at least two frames of (T, K, 3) keypoints")
    steps = np.linalg.norm(np.diff(x3d, axis=0), axis=2)  # (T-1, K)
    per_frame = steps.mean(axis=1)
    return per_frame, float(per_frame.mean())


def quality_gate(seq: SequenceData, thresholds: Thresholds) -> QualityReport:
    """Assemble the three-way pass/fail report for one sequence.

    Occluded fraction counts both environment- and self-occluded joint-frames;
    out-of-frame counts keypoints outside the image or behind the camera.
    """
    _, mean_speed = joint_speed(seq.x3d)
    occluded_fraction = float((seq.occlusion != 0).mean())
    out_fraction = float((~seq.in_frame).mean())

    reasons = set()
    if mean_speed < thresholds.min_mean_speed:
        reasons.add(QualityIssue.STATIONARY)
    if occluded_fraction > thresholds.max_occluded_fraction:
        reasons.add(QualityIssue.SEVERE_OCCLUSION)
    if out_fraction > thresholds.max_out_of_frame_fraction:
        reasons.add(QualityIssue.OUT_OF_VIEW)

    return QualityReport(
        passed=not reasons,
        reasons=frozenset(reasons),
        mean_speed=mean_speed,
        occluded_fraction=occluded_fraction,
        out_of_frame_fraction=out_fraction,
    )
