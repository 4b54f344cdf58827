import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pickplace.errors import EmptyInputError, ParameterError
from pickplace.geom import (Pose2, Pose3, PointCloud, abs_rotation, bounding_box_2d, centroid,
                            homogeneous_2d, matrix_to_quat, quat_to_matrix, rot_x, rot_z, so3_exp,
                            so3_log, transform_points, voxelize, wrap_angle)

finite = st.floats(-5, 5, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
rotvec = st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))


def pose3(t, rv):
    return Pose3.from_rotvec(np.array(rv), t)


def test_homogeneous_2d_identity():
    assert np.array_equal(homogeneous_2d(Pose2()), np.eye(3))


def test_homogeneous_2d_translation():
    T = homogeneous_2d(Pose2(1, 2, 0))
    assert np.array_equal(T[:2, :2], np.eye(2))
    assert np.array_equal(T[:, 2], [1, 2, 1])


def test_homogeneous_2d_quarter_turn():
    p = homogeneous_2d(Pose2(0, 0, math.pi / 2)) @ np.array([1.0, 0.0, 1.0])
    assert np.allclose(p[:2], [0.0, 1.0], atol=1e-15)


def test_pose2_theta_wrapped():
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    assert Pose2(0, 0, -math.pi).theta == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == math.pi


@given(st.tuples(finite, finite, angle), st.tuples(finite, finite, angle))
def test_homogeneous_2d_composition(a, b):
    p, q = Pose2(*a), Pose2(*b)
    lhs = homogeneous_2d(p) @ homogeneous_2d(q)
    assert np.allclose(lhs, homogeneous_2d(p.compose(q)), atol=1e-12, rtol=0)


def test_abs_rotation_identity_and_half_turn():
    assert np.array_equal(abs_rotation(Pose3()), np.eye(3))
    # hand-written R_z(pi), signs stripped
    Rz = np.array([[-1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]])
    assert np.allclose(abs_rotation(Pose3.from_rt(rot_z(math.pi), np.zeros(3))), np.abs(Rz), atol=1e-12)


def test_abs_rotation_quarter_turn_x():
    Rx = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    got = abs_rotation(Pose3.from_rt(rot_x(math.pi / 2), np.zeros(3)))
    assert np.allclose(got, np.abs(Rx), atol=1e-12)


def test_abs_rotation_factored_mode_differs_in_general():
    R = so3_exp([0.4, -0.7, 0.3])
    e = abs_rotation(R)
    f = abs_rotation(R, mode="factored")
    assert np.all(e >= 0) and np.all(f >= 0)
    assert not np.allclose(e, f)
    with pytest.raises(ParameterError):
        abs_rotation(R, mode="other")


def test_pose3_quaternion_canonical():
    p = Pose3((0, 0, 0), (-1.0, 0, 0, 0))
    assert p.rotation[0] == 1.0
    q = Pose3.from_rotvec([0.3, 2.0, -1.0]).rotation
    assert abs(np.linalg.norm(q) - 1) < 1e-9 and q[0] >= 0


@given(rotvec)
def test_quaternion_round_trip(rv):
    R = so3_exp(rv)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-9)


@given(rotvec)
def test_so3_log_inverts_exp(rv):
    rv = np.array(rv)
    if np.linalg.norm(rv) >= math.pi - 1e-3:
        rv = rv * (math.pi - 1e-3) / np.linalg.norm(rv)
    assert np.allclose(so3_log(so3_exp(rv)), rv, atol=1e-7)


def test_transform_identity_and_translation():
    c = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    assert np.array_equal(transform_points(Pose3(), c).points, c.points)
    out = transform_points(Pose3((0, 0, 1)), PointCloud([[0, 0, 0]]))
    assert np.array_equal(out.points, [[0, 0, 1]])


@given(vec3, rotvec)
def test_transform_inverse_round_trip(t, rv):
    p = pose3(t, rv)
    c = PointCloud(np.random.default_rng(1).uniform(-1, 1, size=(15, 3)))
    back = transform_points(p.inverse(), transform_points(p, c))
    assert np.allclose(back.points, c.points, atol=1e-9)


@given(vec3, rotvec, vec3, rotvec)
def test_transform_is_group_action(t1, r1, t2, r2):
    p1, p2 = pose3(t1, r1), pose3(t2, r2)
    c = PointCloud(np.random.default_rng(2).uniform(-1, 1, size=(10, 3)))
    lhs = transform_points(p2, transform_points(p1, c)).points
    rhs = transform_points(p2.compose(p1), c).points
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_bounding_box_examples():
    b = bounding_box_2d(PointCloud([[0.3, -0.2, 5.0]]))
    assert (b.length, b.width) == (0.0, 0.0)
    b = bounding_box_2d(PointCloud([[0, 0, 1], [2, 1, -3]]))
    assert (b.length, b.width) == (2.0, 1.0)
    P = np.random.default_rng(3).uniform(0, 1, size=(30, 3))
    b0 = bounding_box_2d(PointCloud(P))
    b1 = bounding_box_2d(PointCloud(np.vstack([P, P + [3, 0, 0]])))
    assert b1.length == pytest.approx(b0.length + 3, abs=1e-12)
    assert b1.width == pytest.approx(b0.width, abs=1e-12)
    with pytest.raises(EmptyInputError):
        bounding_box_2d(PointCloud(np.zeros((0, 3))))


@given(st.tuples(finite, finite, finite))
def test_bounding_box_translation_equivariant_and_z_invariant(d):
    P = np.random.default_rng(4).uniform(-1, 1, size=(25, 3))
    b0 = bounding_box_2d(PointCloud(P))
    b1 = bounding_box_2d(PointCloud(P + np.array(d)))
    assert b1.length == pytest.approx(b0.length, abs=1e-9)
    assert b1.width == pytest.approx(b0.width, abs=1e-9)
    assert np.allclose(np.array(b1.center) - b0.center, d[:2], atol=1e-9)


def test_centroid_examples():
    assert np.array_equal(centroid(PointCloud([[1, 2, 3]])), [1, 2, 3])
    assert np.array_equal(centroid(PointCloud([[0, 0, 0], [2, 0, 0]])), [1, 0, 0])
    P = np.random.default_rng(5).uniform(0, 1, size=(1000, 3))
    assert np.allclose(centroid(PointCloud(P)), 0.5, atol=0.05)
    with pytest.raises(EmptyInputError):
        centroid(PointCloud(np.zeros((0, 3))))


def test_voxelize_single_point():
    g = voxelize(PointCloud([[0.1, 0.2, 0.3]]), 0.01, padding=2)
    assert g.dims == (5, 5, 5)
    assert g.cells.sum() == 1 and g.cells[2, 2, 2]


def test_voxelize_same_cell_and_offsets():
    g = voxelize(PointCloud([[0, 0, 0], [0.001, 0.001, 0.001]]), 0.01)
    assert g.cells.sum() == 1
    g = voxelize(PointCloud([[0, 0, 0], [0.1, 0, 0]]), 0.01)
    idx = np.argwhere(g.cells)
    assert idx[1, 0] - idx[0, 0] == 10 and np.array_equal(idx[0, 1:], idx[1, 1:])


def test_voxelize_errors():
    with pytest.raises(EmptyInputError):
        voxelize(PointCloud(np.zeros((0, 3))), 0.01)
    with pytest.raises(ParameterError):
        voxelize(PointCloud([[0, 0, 0]]), 0.0)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.005, 0.05))
def test_voxelize_cells_cover_points(seed, spacing):
    P = np.random.default_rng(seed).uniform(-0.2, 0.2, size=(50, 3))
    g = voxelize(PointCloud(P), spacing)
    idx = g.cell_index(P)
    assert np.all(idx >= 0) and np.all(idx < np.array(g.dims))
    assert np.all(g.cells[idx[:, 0], idx[:, 1], idx[:, 2]])
    # every occupied center lies within half a cell diagonal of some input point
    C = g.occupied_centers()
    d = np.linalg.norm(C[:, None, :] - P[None, :, :], axis=2).min(axis=1)
    assert np.all(d <= math.sqrt(3) / 2 * spacing + 1e-12)


def test_point_cloud_validation():
    with pytest.raises(ParameterError):
        PointCloud([[0, 0]])
    with pytest.raises(ParameterError):
        PointCloud([[0, 0, np.nan]])
