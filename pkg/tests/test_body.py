"""Body model: Rodrigues conversion, joint regression, forward kinematics."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthpose import body
from synthpose.body import (
    KinematicTree,
    PoseParams,
    ShapeParams,
    Translation,
    augmentation_matrix,
    default_tree,
    derive_extra_keypoints,
    forward_kinematics,
    joint_regress,
    load_tree,
    rodrigues,
    rodrigues_batch,
    rotation_to_axis_angle,
    save_tree,
    toy_chain_tree,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def quaternion_rotation_oracle(aa):
    """Axis-angle -> matrix via unit quaternion, independent of Rodrigues."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa)
    if angle == 0.0:
        return np.eye(3)
    axis = aa / angle
    w = np.cos(angle / 2.0)
    x, y, z = np.sin(angle / 2.0) * axis
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def chain_walk_regress_oracle(beta, tree):
    """Naive per-joint walk to the root, re-summing offsets each time."""
    out = np.zeros((tree.joint_count, 3))
    for j in range(tree.joint_count):
        node = j
        while node != -1:
            offset = tree.rest_offsets[node] + tree.shape_blend[node] @ beta
            out[j] += offset
            node = tree.parent_of(node)
    return out


def homogeneous_fk_oracle(theta, beta, t, tree):
    """FK via explicit 4x4 homogeneous matrix products along each chain."""
    offsets = tree.rest_offsets + tree.shape_blend @ beta
    mats = []
    for j in range(tree.joint_count):
        m = np.eye(4)
        m[:3, :3] = quaternion_rotation_oracle(theta[j])
        m[:3, 3] = offsets[j]
        mats.append(m)
    out = np.zeros((tree.joint_count, 3))
    for j in range(tree.joint_count):
        chain = []
        node = j
        while node != -1:
            chain.append(node)
            node = tree.parent_of(node)
        g = np.eye(4)
        for node in reversed(chain):
            g = g @ mats[node]
        out[j] = g[:3, 3] + t
    return out


# ---------------------------------------------------------------------------
# rodrigues
# ---------------------------------------------------------------------------

def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_half_turn_about_x():
    np.testing.assert_allclose(rodrigues([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-15)


def test_rodrigues_matches_quaternion_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        aa = rng.normal(scale=1.5, size=3)
        np.testing.assert_allclose(rodrigues(aa), quaternion_rotation_oracle(aa), atol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(-6.0, 6.0), min_size=3, max_size=3))
def test_rodrigues_always_proper_rotation(aa):
    r = rodrigues(np.array(aa))
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_rodrigues_rejects_nonfinite():
    with pytest.raises(ValueError):
        rodrigues([np.nan, 0, 0])


def test_rotation_to_axis_angle_round_trip():
    rng = np.random.default_rng(11)
    for _ in range(100):
        aa = rng.normal(scale=1.2, size=3)
        back = rotation_to_axis_angle(rodrigues(aa))
        np.testing.assert_allclose(rodrigues(back), rodrigues(aa), atol=1e-10)


def test_rodrigues_batch_shape():
    rng = np.random.default_rng(3)
    aa = rng.normal(size=(5, 4, 3))
    r = rodrigues_batch(aa)
    assert r.shape == (5, 4, 3, 3)
    np.testing.assert_allclose(r[2, 1], rodrigues(aa[2, 1]), atol=1e-14)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def test_pose_params_canonicalized_below_two_pi():
    aa = np.zeros((2, 3))
    aa[0, 0] = 2 * np.pi + 0.5
    aa[1, 1] = -7.0
    pose = PoseParams(aa)
    norms = np.linalg.norm(pose.theta, axis=1)
    assert np.all(norms < 2 * np.pi)
    # canonicalization preserves the rotation itself
    np.testing.assert_allclose(rodrigues(pose.theta[0]), rodrigues(aa[0]), atol=1e-12)
    np.testing.assert_allclose(rodrigues(pose.theta[1]), rodrigues(aa[1]), atol=1e-12)


def test_pose_params_accepts_flat_vector():
    pose = PoseParams(np.zeros(72))
    assert pose.theta.shape == (24, 3)


def test_shape_params_bounds():
    ShapeParams(np.full(10, 5.0))
    with pytest.raises(ValueError):
        ShapeParams(np.full(10, 5.1))
    with pytest.raises(ValueError):
        ShapeParams(np.zeros(9))


def test_translation_validates():
    Translation(np.zeros(3))
    with pytest.raises(ValueError):
        Translation(np.array([1.0, np.inf, 0.0]))


# ---------------------------------------------------------------------------
# tree invariants and file round-trip
# ---------------------------------------------------------------------------

def test_tree_rejects_bad_parent_order():
    tree = default_tree()
    parents = tree.parents.copy()
    parents[0] = 5
    with pytest.raises(ValueError):
        KinematicTree(parents, tree.rest_offsets, tree.shape_blend, tree.names)


def test_tree_rejects_zero_length_bone():
    tree = default_tree()
    rest = tree.rest_offsets.copy()
    rest[3] = 0.0
    with pytest.raises(ValueError):
        KinematicTree(tree.parents, rest, tree.shape_blend, tree.names)


def test_tree_file_round_trip(tmp_path):
    tree = default_tree()
    path = tmp_path / "tree.json"
    save_tree(tree, path)
    loaded = load_tree(path)
    np.testing.assert_array_equal(loaded.parents, tree.parents)
    np.testing.assert_array_equal(loaded.rest_offsets, tree.rest_offsets)
    np.testing.assert_array_equal(loaded.shape_blend, tree.shape_blend)
    assert loaded.names == tree.names


def test_tree_file_rejects_wrong_format(tmp_path):
    path = tmp_path / "bogus.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ValueError):
        load_tree(path)


# ---------------------------------------------------------------------------
# joint_regress
# ---------------------------------------------------------------------------

def test_regress_zero_beta_is_rest_accumulation():
    tree = default_tree()
    joints = joint_regress(np.zeros(10), tree)
    expected = chain_walk_regress_oracle(np.zeros(10), tree)
    np.testing.assert_allclose(joints, expected, atol=1e-15)


def test_regress_linearity_in_beta():
    tree = default_tree()
    rng = np.random.default_rng(21)
    beta = rng.uniform(-2, 2, 10)
    j0 = joint_regress(np.zeros(10), tree)
    j1 = joint_regress(beta, tree)
    j2 = joint_regress(2 * beta, tree)
    np.testing.assert_allclose(j2 - j0, 2 * (j1 - j0), atol=1e-12)


def test_regress_affine_three_collinear_samples():
    tree = default_tree()
    rng = np.random.default_rng(22)
    a = rng.uniform(-2, 2, 10)
    b = rng.uniform(-2, 2, 10)
    mid = joint_regress((a + b) / 2, tree)
    np.testing.assert_allclose(mid, (joint_regress(a, tree) + joint_regress(b, tree)) / 2, atol=1e-12)


def test_regress_matches_chain_walk_oracle():
    tree = default_tree()
    rng = np.random.default_rng(23)
    for _ in range(20):
        beta = rng.uniform(-2, 2, 10)
        np.testing.assert_allclose(
            joint_regress(beta, tree), chain_walk_regress_oracle(beta, tree), atol=1e-12
        )


def test_regress_rejects_wrong_beta_size():
    with pytest.raises(ValueError):
        joint_regress(np.zeros(7), default_tree())


# ---------------------------------------------------------------------------
# forward_kinematics
# ---------------------------------------------------------------------------

def test_fk_identity_pose_equals_regress():
    tree = default_tree()
    rng = np.random.default_rng(31)
    beta = rng.uniform(-2, 2, 10)
    out = forward_kinematics(np.zeros((24, 3)), beta, np.zeros(3), tree)
    np.testing.assert_allclose(out, joint_regress(beta, tree), atol=1e-15)


def test_fk_root_only_rotation_is_global_rigid_motion():
    tree = default_tree()
    rng = np.random.default_rng(32)
    beta = rng.uniform(-2, 2, 10)
    t = rng.normal(size=3)
    theta = np.zeros((24, 3))
    theta[0] = rng.normal(size=3)
    rot = rodrigues(theta[0])
    rest = joint_regress(beta, tree)
    expected = (rest - rest[0]) @ rot.T + rest[0] + t
    np.testing.assert_allclose(forward_kinematics(theta, beta, t, tree), expected, atol=1e-12)


def test_fk_matches_homogeneous_matrix_oracle():
    tree = default_tree()
    rng = np.random.default_rng(33)
    for _ in range(10):
        theta = rng.normal(scale=0.8, size=(24, 3))
        beta = rng.uniform(-2, 2, 10)
        t = rng.normal(scale=2.0, size=3)
        np.testing.assert_allclose(
            forward_kinematics(theta, beta, t, tree),
            homogeneous_fk_oracle(theta, beta, t, tree),
            atol=1e-10,
        )


def test_fk_preserves_bone_lengths():
    tree = default_tree()
    rng = np.random.default_rng(34)
    for _ in range(20):
        theta = rng.normal(scale=1.2, size=(24, 3))
        beta = rng.uniform(-2, 2, 10)
        posed = forward_kinematics(theta, beta, rng.normal(size=3), tree)
        rest = joint_regress(beta, tree)
        for j in range(1, 24):
            p = tree.parent_of(j)
            rest_len = np.linalg.norm(rest[j] - rest[p])
            posed_len = np.linalg.norm(posed[j] - posed[p])
            assert abs(rest_len - posed_len) <= 1e-9


def test_fk_global_rotation_compensated_by_translation():
    # rotating the root and compensating t yields rigidly rotated keypoints
    tree = default_tree()
    rng = np.random.default_rng(35)
    theta = rng.normal(scale=0.5, size=(24, 3))
    theta[0] = 0.0
    beta = rng.uniform(-2, 2, 10)
    base = forward_kinematics(theta, beta, np.zeros(3), tree)
    g = rng.normal(size=3)
    rot = rodrigues(g)
    theta_rot = theta.copy()
    theta_rot[0] = g
    # with root rotation g, FK pivots about the root joint; compensate so the
    # whole cloud is rigidly rotated about the origin
    root = base[0]
    t_comp = rot @ root - root
    rotated = forward_kinematics(theta_rot, beta, t_comp, tree)
    np.testing.assert_allclose(rotated, base @ rot.T, atol=1e-9)


def test_fk_accepts_param_objects():
    tree = default_tree()
    out = forward_kinematics(PoseParams(np.zeros((24, 3))), ShapeParams(), Translation(), tree)
    np.testing.assert_allclose(out, joint_regress(np.zeros(10), tree))


def test_fk_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(np.zeros((23, 3)), np.zeros(10), np.zeros(3), default_tree())


# ---------------------------------------------------------------------------
# derived keypoints
# ---------------------------------------------------------------------------

def test_head_top_construction_collinear():
    tree = default_tree()
    x = joint_regress(np.zeros(10), tree)
    aug = derive_extra_keypoints(x, tree)
    head = x[tree.names.index("head")]
    neck = x[tree.names.index("neck")]
    np.testing.assert_allclose(aug[-2], head + body.HEAD_TOP_FACTOR * (head - neck), atol=1e-12)
    np.testing.assert_allclose(aug[-1], head + body.NOSE_FACTOR * (head - neck), atol=1e-12)
    # collinear with the neck-head line
    d1 = aug[-2] - head
    d2 = head - neck
    np.testing.assert_allclose(np.cross(d1, d2), np.zeros(3), atol=1e-12)


def test_extra_keypoints_degenerate_head_equals_neck():
    tree = toy_chain_tree(4)
    x = joint_regress(np.zeros(10), tree)
    x[tree.names.index("head")] = x[tree.names.index("neck")]
    aug = derive_extra_keypoints(x, tree)
    np.testing.assert_allclose(aug[-2], x[tree.names.index("head")], atol=1e-15)
    np.testing.assert_allclose(aug[-1], x[tree.names.index("head")], atol=1e-15)


def test_exactly_two_appended_regardless_of_joint_count():
    # the full engine skeleton appends 2 interpolated points (98 -> 100);
    # here the count is +2 whatever J is
    for tree in (default_tree(), toy_chain_tree(4), toy_chain_tree(7)):
        x = joint_regress(np.zeros(10), tree)
        assert derive_extra_keypoints(x, tree).shape == (tree.joint_count + 2, 3)


def test_augmentation_rows_are_affine():
    mat = augmentation_matrix(default_tree())
    np.testing.assert_allclose(mat.sum(axis=1), np.ones(26), atol=1e-12)


def test_extra_keypoints_missing_names():
    tree = default_tree()
    names = tuple(n if n != "head" else "skull" for n in tree.names)
    renamed = KinematicTree(tree.parents, tree.rest_offsets, tree.shape_blend, names)
    with pytest.raises(ValueError):
        derive_extra_keypoints(joint_regress(np.zeros(10), renamed), renamed)
