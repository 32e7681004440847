"""Metrics: MPJPE, Procrustes alignment, PA-MPJPE, binning, dataset stats."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from synthpose.body import default_tree
from synthpose.camera import (
    CameraDistribution,
    FactorRange,
    default_distribution,
    sample_camera,
)
from synthpose.engine import (
    default_actions,
    default_subjects,
    generate_scenario,
    save_sequence,
    synthesize_sequence,
)
from synthpose.metrics import (
    AlignmentResult,
    bin_density_analysis,
    dataset_stats,
    mpjpe,
    pa_mpjpe,
    procrustes_align,
    write_histogram_svg,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# mpjpe
# ---------------------------------------------------------------------------

def test_mpjpe_identical_zero():
    pts = np.random.default_rng(0).normal(size=(24, 3))
    assert mpjpe(pts, pts) == 0.0


def test_mpjpe_three_four_five():
    gt = np.zeros((24, 3))
    pred = gt + np.array([0.003, 0.004, 0.0])
    assert abs(mpjpe(pred, gt) - 5.0) < 1e-9


def test_mpjpe_matches_per_joint_oracle():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(17, 3))
    gt = rng.normal(size=(17, 3))
    want = np.mean([np.sqrt(((pred[j] - gt[j]) ** 2).sum()) for j in range(17)]) * 1000
    assert abs(mpjpe(pred, gt) - want) < 1e-9


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((4, 3)), np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# procrustes_align
# ---------------------------------------------------------------------------

def test_align_identity_when_equal():
    pts = np.random.default_rng(2).normal(size=(10, 3))
    res = procrustes_align(pts, pts)
    np.testing.assert_allclose(res.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(res.translation, np.zeros(3), atol=1e-9)
    assert abs(res.scale - 1.0) < 1e-9


def test_align_recovers_similarity_transform():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(12, 3))
    rot = random_rotation(rng)
    # pred is gt pushed through the inverse transform; alignment must undo it
    pred = (gt - np.array([0.1, -0.4, 0.9])) @ rot
    res = procrustes_align(pred, gt)
    np.testing.assert_allclose(res.aligned, gt, atol=1e-9)
    assert abs(res.scale - 1.0) < 1e-9


def test_align_objective_beats_random_search():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(10, 3))
    gt = rng.normal(size=(10, 3))
    res = procrustes_align(pred, gt)
    best = ((res.aligned - gt) ** 2).sum()
    for _ in range(10_000):
        s = rng.uniform(0.2, 3.0)
        rot = random_rotation(rng)
        t = rng.normal(scale=1.5, size=3)
        candidate = ((s * pred @ rot.T + t - gt) ** 2).sum()
        assert candidate >= best - 1e-9


def test_align_never_reflects():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pred = rng.normal(size=(6, 3))
        gt = rng.normal(size=(6, 3))
        res = procrustes_align(pred, gt)
        assert np.linalg.det(res.rotation) > 0.99


def test_align_idempotent():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(9, 3))
    gt = rng.normal(size=(9, 3))
    first = procrustes_align(pred, gt)
    second = procrustes_align(first.aligned, gt)
    np.testing.assert_allclose(second.rotation, np.eye(3), atol=1e-7)
    np.testing.assert_allclose(second.translation, np.zeros(3), atol=1e-7)
    assert abs(second.scale - 1.0) < 1e-7


def test_align_degenerate_collinear_rejected():
    line = np.outer(np.arange(5, dtype=float), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        procrustes_align(line, line + np.array([0.0, 1.0, 0.0]))


def test_align_without_scale():
    rng = np.random.default_rng(7)
    gt = rng.normal(size=(8, 3))
    pred = 2.0 * gt
    rigid = procrustes_align(pred, gt, with_scale=False)
    assert rigid.scale == 1.0
    scaled = procrustes_align(pred, gt, with_scale=True)
    assert abs(scaled.scale - 0.5) < 1e-9
    np.testing.assert_allclose(scaled.aligned, gt, atol=1e-9)


# ---------------------------------------------------------------------------
# pa_mpjpe
# ---------------------------------------------------------------------------

def test_pa_mpjpe_removes_global_translation():
    rng = np.random.default_rng(8)
    gt = rng.normal(size=(24, 3))
    pred = gt + np.array([0.003, 0.0, 0.0])
    assert abs(mpjpe(pred, gt) - 3.0) < 1e-9
    assert pa_mpjpe(pred, gt) < 1e-9


def test_pa_mpjpe_identical_zero():
    pts = np.random.default_rng(9).normal(size=(24, 3))
    assert pa_mpjpe(pts, pts) < 1e-9


def test_pa_mpjpe_matches_composition_oracle():
    rng = np.random.default_rng(10)
    pred = rng.normal(size=(15, 3))
    gt = rng.normal(size=(15, 3))
    res = procrustes_align(pred, gt)
    assert abs(pa_mpjpe(pred, gt) - mpjpe(res.aligned, gt)) < 1e-12


def test_pa_mpjpe_leq_mpjpe_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(300):
        pred = rng.normal(size=(14, 3))
        gt = rng.normal(size=(14, 3))
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_pa_mpjpe_invariant_under_similarity_transforms():
    rng = np.random.default_rng(12)
    pred = rng.normal(size=(20, 3))
    gt = rng.normal(size=(20, 3))
    base = pa_mpjpe(pred, gt)
    for _ in range(200):
        s = rng.uniform(0.3, 2.5)
        rot = random_rotation(rng)
        t = rng.normal(scale=2.0, size=3)
        assert abs(pa_mpjpe(s * pred @ rot.T + t, gt) - base) < 1e-9


# ---------------------------------------------------------------------------
# bin_density_analysis
# ---------------------------------------------------------------------------

def test_binning_single_bin_holds_everything():
    values = np.array([1.0, 1.2, 1.4])
    errors = np.array([10.0, 20.0, 30.0])
    report = bin_density_analysis(values, errors, bins=1)
    assert report.counts.tolist() == [3]
    assert abs(report.mean_error[0] - 20.0) < 1e-12


def test_binning_uniform_values_equal_counts():
    values = np.repeat(np.arange(10) + 0.5, 7)
    errors = np.zeros_like(values)
    report = bin_density_analysis(values, errors, bins=np.arange(11.0))
    assert report.counts.tolist() == [7] * 10
    assert report.counts.sum() == values.size


def test_binning_matches_brute_force_grouping():
    rng = np.random.default_rng(13)
    values = rng.uniform(0, 5, 500)
    errors = rng.uniform(0, 100, 500)
    edges = np.linspace(0, 5, 9)
    report = bin_density_analysis(values, errors, bins=edges)
    for b in range(8):
        if b < 7:
            mask = (values >= edges[b]) & (values < edges[b + 1])
        else:
            mask = (values >= edges[b]) & (values <= edges[b + 1])
        assert report.counts[b] == mask.sum()
        if mask.any():
            assert abs(report.mean_error[b] - errors[mask].mean()) < 1e-9


def test_binning_empty_bins_flagged():
    report = bin_density_analysis([0.5, 3.5], [1.0, 2.0], bins=np.array([0.0, 1.0, 2.0, 3.0, 4.0]))
    assert report.empty.tolist() == [False, True, True, False]
    assert np.isnan(report.mean_error[1])


def test_binning_needs_records():
    with pytest.raises(ValueError):
        bin_density_analysis([], [], bins=4)


# ---------------------------------------------------------------------------
# dataset_stats
# ---------------------------------------------------------------------------

def _tiny_sequence(seed, camera_dist):
    """A minimal two-frame sequence with a sampled camera, for stats tests."""
    from synthpose.camera import project
    from synthpose.engine import GroundTruth, ScenarioSpec, SequenceData

    rng = np.random.default_rng(seed)
    x3d = np.tile(rng.normal(scale=0.3, size=(1, 4, 3)), (2, 1, 1))
    x3d[1] += 0.01
    cam = sample_camera(camera_dist, x3d[:, 0].mean(axis=0), seed)
    x2d = np.empty((2, 4, 2))
    in_frame = np.empty((2, 4), dtype=bool)
    in_front = np.empty((2, 4), dtype=bool)
    for t in range(2):
        x2d[t], in_frame[t], in_front[t] = project(x3d[t], cam)
    spec = ScenarioSpec(sequence_id=f"tiny_{seed}", subject_id=0, action_id=0,
                        location=(0.0, 0.0, 0.0), camera_seed=seed, weather="clear",
                        time_of_day=12.0, seed=seed)
    return SequenceData(spec=spec, camera=cam, keypoint_names=("a", "b", "c", "d"),
                        x3d=x3d, x2d=x2d, in_frame=in_frame, in_front=in_front,
                        occlusion=np.zeros((2, 4), dtype=np.int8))


def test_dataset_stats_empty_dir(tmp_path):
    stats = dataset_stats(tmp_path)
    assert stats.sequences == 0 and stats.yaw is None


def test_dataset_stats_point_mass_single_bin(tmp_path):
    dist = CameraDistribution(
        yaw=FactorRange.uniform(0.4, 0.4),
        elevation=FactorRange.uniform(0.2, 0.2),
        distance=FactorRange.uniform(3.0, 3.0),
        height=FactorRange.uniform(0.0, 0.0),
    )
    for seed in range(20):
        save_sequence(_tiny_sequence(seed, dist), tmp_path / f"s{seed:03d}.json")
    stats = dataset_stats(tmp_path)
    assert stats.sequences == 20
    assert (stats.yaw.counts > 0).sum() == 1
    assert (stats.elevation.counts > 0).sum() == 1
    assert (stats.distance.counts > 0).sum() == 1


def test_dataset_stats_matches_sampler_chi_square(tmp_path):
    dist = default_distribution()
    n = 1000
    for seed in range(n):
        save_sequence(_tiny_sequence(seed, dist), tmp_path / f"s{seed:04d}.json")
    stats = dataset_stats(tmp_path)
    assert stats.sequences == n
    # elevation uniform on [-30deg, 60deg]: chi-square against the sampler law
    lo, hi = math.radians(-30), math.radians(60)
    edges = stats.elevation.edges
    probs = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None) / (hi - lo)
    expected = probs * n
    live = expected > 0
    chi2 = ((stats.elevation.counts[live] - expected[live]) ** 2 / expected[live]).sum()
    assert chi2 < scipy_stats.chi2.ppf(0.999, df=live.sum() - 1)
    assert stats.elevation.counts[~live].sum() == 0


def test_dataset_stats_exports_files(tmp_path):
    dist = default_distribution()
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    for seed in range(5):
        save_sequence(_tiny_sequence(seed, dist), data_dir / f"s{seed}.json")
    out_dir = tmp_path / "out"
    stats = dataset_stats(data_dir, out_dir)
    assert stats.sequences == 5
    assert (out_dir / "stats.csv").exists()
    assert (out_dir / "summary.json").exists()
    svg = (out_dir / "camera_yaw_rad.svg").read_text()
    assert svg.startswith("<svg") and "<rect" in svg


def test_histogram_svg_deterministic(tmp_path):
    edges = np.linspace(0, 1, 6)
    counts = np.array([1, 4, 2, 0, 3])
    write_histogram_svg(tmp_path / "a.svg", edges, counts, title="t")
    write_histogram_svg(tmp_path / "b.svg", edges, counts, title="t")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_dataset_stats_on_real_synth_output(tmp_path):
    tree = default_tree()
    subjects = default_subjects()
    actions = default_actions(count=2)
    dist = default_distribution()
    spec = generate_scenario(3, subjects, actions)
    seq = synthesize_sequence(spec, tree, [], subjects, actions, dist)
    save_sequence(seq, tmp_path / "real.json")
    stats = dataset_stats(tmp_path)
    assert stats.sequences == 1 and stats.frames == seq.frames
    assert 0.99 < sum(stats.occlusion_rates.values()) < 1.01
    assert stats.pose_spread > 0
