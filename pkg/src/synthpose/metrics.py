"""Evaluation metrics (MPJPE, PA-MPJPE) and dataset-analysis utilities."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import camera_factors
from .engine import load_sequence


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint position error in millimeters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (J, 3)")
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray   # (3, 3), proper
    translation: np.ndarray
    scale: float
    aligned: np.ndarray    # s * R @ pred + t

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("alignment scale must be positive")


def procrustes_align(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> AlignmentResult:
    """Similarity transform minimizing sum ||s R pred_j + t - gt_j||^2.

    Closed form via the SVD of the centered cross-covariance, with the
    determinant correction that forbids reflections. `with_scale=False` gives
    the strictly rigid variant.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (J, 3)")
    if pred.shape[0] < 3:
        raise ValueError("alignment needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    x = pred - mu_p
    y = gt - mu_g
    cov = y.T @ x / pred.shape[0]
    if np.linalg.matrix_rank(cov) < 2:
        raise ValueError("degenerate (collinear) configuration")
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    correction = np.diag([1.0, 1.0, sign])
    rotation = u @ correction @ vt
    if with_scale:
        var_p = (x ** 2).sum() / pred.shape[0]
        scale = float((d * np.diag(correction)).sum() / var_p)
    else:
        scale = 1.0
    translation = mu_g - scale * rotation @ mu_p
    aligned = scale * pred @ rotation.T + translation
    return AlignmentResult(rotation=rotation, translation=translation, scale=scale,
                           aligned=aligned)


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> float:
    """MPJPE after Procrustes alignment of pred onto gt, millimeters."""
    return mpjpe(procrustes_align(pred, gt, with_scale=with_scale).aligned, gt)


@dataclass(frozen=True)
class BinReport:
    """Per-bin sample density and mean error for one factor."""

    factor: str
    edges: np.ndarray       # (B+1,)
    counts: np.ndarray      # (B,)
    mean_error: np.ndarray  # (B,), NaN where empty
    empty: np.ndarray       # (B,) bool

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "mean_error": [None if e != e else e for e in self.mean_error.tolist()],
        }


def bin_density_analysis(values, errors, bins, factor: str = "factor") -> BinReport:
    """Discretize samples into bins; report density and per-bin mean error (mm).

    `bins` is an int (equal-width over the data range) or explicit edges.
    Empty bins are reported with count 0 and NaN mean, flagged in `empty`.
    """
    values = np.asarray(values, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one record")
    if values.shape != errors.shape:
        raise ValueError("values and errors must align")
    counts, edges = np.histogram(values, bins=bins)
    idx = np.clip(np.digitize(values, edges) - 1, 0, len(counts) - 1)
    mean_error = np.full(len(counts), np.nan)
    for b in range(len(counts)):
        mask = idx == b
        if mask.any():
            mean_error[b] = errors[mask].mean()
    return BinReport(factor=factor, edges=edges, counts=counts,
                     mean_error=mean_error, empty=counts == 0)


@dataclass(frozen=True)
class DatasetStats:
    sequences: int
    frames: int
    yaw: BinReport | None
    elevation: BinReport | None
    distance: BinReport | None
    occlusion_rates: dict
    pose_spread: float  # mean std of root-centered keypoints, meters


def dataset_stats(directory: str | Path, out_dir: str | Path | None = None) -> DatasetStats:
    """Summarize a directory of sequence files; optionally export tables and SVGs.

    Camera factors are recovered geometrically from each camera against the
    mean root keypoint; occlusion rates aggregate over all joint-frames.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.json"))
    yaws, elevations, distances = [], [], []
    occ_counts = np.zeros(3, dtype=np.int64)
    spreads = []
    frames = 0
    loaded = 0
    for path in paths:
        try:
            seq = load_sequence(path)
        except (ValueError, KeyError):
            continue  # not a sequence file
        loaded += 1
        frames += seq.frames
        root = seq.x3d[:, 0].mean(axis=0)
        yaw, elev, dist = camera_factors(seq.camera, root)
        yaws.append(yaw)
        elevations.append(elev)
        distances.append(dist)
        for code in range(3):
            occ_counts[code] += int((seq.occlusion == code).sum())
        centered = seq.x3d - seq.x3d[:, :1]
        spreads.append(float(centered.std(axis=0).mean()))

    if loaded == 0:
        return DatasetStats(sequences=0, frames=0, yaw=None, elevation=None,
                            distance=None, occlusion_rates={}, pose_spread=0.0)

    zeros = np.zeros(loaded)
    yaw_report = bin_density_analysis(yaws, zeros, np.linspace(-math.pi, math.pi, 19), "camera_yaw_rad")
    elev_report = bin_density_analysis(
        elevations, zeros, np.linspace(-math.pi / 2, math.pi / 2, 19), "camera_elevation_rad")
    dist_report = bin_density_analysis(
        distances, zeros, np.linspace(0.0, max(distances) * 1.05 + 1e-9, 13), "camera_distance_m")
    total = occ_counts.sum()
    rates = {"visible": occ_counts[0] / total, "occluded": occ_counts[1] / total,
             "self_occluded": occ_counts[2] / total}
    stats = DatasetStats(
        sequences=loaded, frames=frames, yaw=yaw_report, elevation=elev_report,
        distance=dist_report, occlusion_rates=rates,
        pose_spread=float(np.mean(spreads)),
    )
    if out_dir is not None:
        export_stats(stats, out_dir)
    return stats


def export_stats(stats: DatasetStats, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["factor,bin_lo,bin_hi,count"]
    for report in (stats.yaw, stats.elevation, stats.distance):
        if report is None:
            continue
        for b in range(len(report.counts)):
            lines.append(f"{report.factor},{report.edges[b]!r},{report.edges[b + 1]!r},{report.counts[b]}")
        write_histogram_svg(out_dir / f"{report.factor}.svg", report.edges, report.counts,
                            title=report.factor)
    summary = {
        "sequences": stats.sequences,
        "frames": stats.frames,
        "occlusion_rates": stats.occlusion_rates,
        "pose_spread_m": stats.pose_spread,
    }
    (out_dir / "stats.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


def write_histogram_svg(path: str | Path, edges, counts, title: str = "",
                        width: int = 480, height: int = 260) -> None:
    """Minimal deterministic SVG bar chart (no plotting dependency)."""
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    margin = 40
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    peak = counts.max() if counts.size and counts.max() > 0 else 1.0
    span = edges[-1] - edges[0] if edges[-1] > edges[0] else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for i, count in enumerate(counts):
        x0 = margin + plot_w * (edges[i] - edges[0]) / span
        x1 = margin + plot_w * (edges[i + 1] - edges[0]) / span
        bar_h = plot_h * count / peak
        parts.append(
            f'<rect x="{x0:.2f}" y="{height - margin - bar_h:.2f}" '
            f'width="{max(x1 - x0 - 1.0, 0.5):.2f}" height="{bar_h:.2f}" fill="#4878a8"/>'
        )
    parts.append(f'<text x="{margin}" y="{height - margin + 16}" font-size="10">{edges[0]:.3g}</text>')
    parts.append(
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="end" '
        f'font-size="10">{edges[-1]:.3g}</text>'
    )
    parts.append(f'<text x="{margin - 4}" y="{margin}" text-anchor="end" font-size="10">{int(peak)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
