import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, relative_error
from pickplace.errors import EmptyInputError, FormatError, ParameterError
from pickplace.geom import PointCloud, Pose3, downsample, so3_exp, so3_log
from pickplace.robot import (GripperGeometry, Joint, arm_from_dict, arm_to_dict, augment_object_cloud,
                             clamp_joints, default_arm, fk, fk_residual, geometric_jacobian, ik_seeds,
                             load_arm, planar_two_link, solve_ik)

ARM, GRIPPER = default_arm()
TWO = planar_two_link()


def random_q(rng, arm=ARM):
    return rng.uniform(arm.lower, arm.upper)


def test_planar_two_link_examples():
    assert np.allclose(fk(TWO, [0.0, 0.0]).translation, [2, 0, 0], atol=1e-15)
    assert np.allclose(fk(TWO, [math.pi / 2, 0.0]).translation, [0, 2, 0], atol=1e-15)
    assert np.allclose(fk(TWO, [0.0, math.pi / 2]).translation, [1, 1, 0], atol=1e-15)


def test_fk_dimension_error():
    with pytest.raises(ParameterError):
        fk(TWO, [0.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1), st.integers(-2, 2))
def test_fk_periodic(a, b, j, k):
    q = np.array([a, b])
    q2 = q.copy()
    q2[j] += 2 * math.pi * k
    assert np.allclose(fk(TWO, q).matrix(), fk(TWO, q2).matrix(), atol=1e-9)


def test_residual_zero_at_fk():
    rng = np.random.default_rng(0)
    for _ in range(10):
        q = random_q(rng)
        r, _ = fk_residual(ARM, q, fk(ARM, q))
        assert np.max(np.abs(r)) < 1e-12


def test_residual_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(60):
        q = random_q(rng)
        # targets near the current pose keep the rotation error away from the log cut
        target = fk(ARM, q + rng.normal(scale=0.3, size=ARM.n))
        _, J = fk_residual(ARM, q, target)
        fd = central_difference(lambda u: fk_residual(ARM, u, target)[0], q)
        worst = max(worst, relative_error(J, fd))
    assert worst <= 1e-4


def test_residual_target_jacobian_matches_fd():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        q = random_q(rng)
        target = fk(ARM, q + rng.normal(scale=0.3, size=ARM.n))
        _, _, Jt = fk_residual(ARM, q, target, target_jacobian=True)

        def moved(u):
            T = Pose3.from_rt(target.R @ so3_exp(u[3:]), target.translation + u[:3])
            return fk_residual(ARM, q, T)[0]
        worst = max(worst, relative_error(Jt, central_difference(moved, np.zeros(6))))
    assert worst <= 1e-4


def test_geometric_jacobian_matches_fd():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        q = random_q(rng)
        J = geometric_jacobian(ARM, q)
        fd_p = central_difference(lambda u: fk(ARM, u).translation, q)
        R0 = fk(ARM, q).R
        # world-frame angular velocity: log(R(q+h) R(q)^T) / h
        fd_w = central_difference(lambda u: so3_log(fk(ARM, u).R @ R0.T), q)
        worst = max(worst, relative_error(J, np.vstack([fd_p, fd_w])))
    assert worst <= 1e-4


def test_residual_descends_along_negative_jtr():
    rng = np.random.default_rng(4)
    for _ in range(30):
        q = random_q(rng)
        target = fk(ARM, q + rng.normal(scale=0.3, size=ARM.n))
        r, J = fk_residual(ARM, q, target)
        step = -J.T @ r
        r2, _ = fk_residual(ARM, q + 1e-4 * step, target)
        assert r2 @ r2 < r @ r


def test_solve_ik_reaches_fk_target():
    q = np.array([0.2, 0.6, 0.1, -1.2, 0.1, 0.9, 0.3])
    target = fk(ARM, q)
    q_sol, err = solve_ik(ARM, target, ik_seeds(ARM, target.translation), tol=1e-4)
    assert err <= 1e-4
    assert np.linalg.norm(fk_residual(ARM, q_sol, target)[0]) <= 1e-4
    assert np.all(q_sol >= ARM.lower) and np.all(q_sol <= ARM.upper)


def test_clamp_examples():
    q = 0.5 * (ARM.lower + ARM.upper)
    assert np.array_equal(clamp_joints(ARM, q), q)
    assert np.array_equal(clamp_joints(ARM, ARM.lower - 1.0), ARM.lower)


@given(st.lists(st.floats(-10, 10), min_size=7, max_size=7),
       st.lists(st.floats(-10, 10), min_size=7, max_size=7))
def test_clamp_properties(a, b):
    a, b = np.array(a), np.array(b)
    ca, cb = clamp_joints(ARM, a), clamp_joints(ARM, b)
    assert np.array_equal(clamp_joints(ARM, ca), ca)
    assert np.all(ca >= ARM.lower) and np.all(ca <= ARM.upper)
    assert np.linalg.norm(ca - cb) <= np.linalg.norm(a - b) + 1e-12


def test_joint_validation():
    with pytest.raises(ParameterError):
        Joint((0, 0, 0), Pose3(), -1, 1)
    with pytest.raises(ParameterError):
        Joint((0, 0, 1), Pose3(), 1, -1)
    with pytest.raises(ParameterError):
        GripperGeometry([[0, 0, 0]], [0.0])


def _cloud(seed=0, n=200):
    return PointCloud(np.random.default_rng(seed).uniform(-0.05, 0.05, size=(n, 3)) + [0.5, 0.1, 0.05])


def test_augment_cardinality_and_zero_spheres():
    Z = _cloud()
    palm = Pose3.from_rotvec([0.0, 1.0, 0.0], [0.5, 0.1, 0.2])
    qs = augment_object_cloud(Z, palm, GRIPPER, spacing=0.01)
    n_obj = len(downsample(Z.points - Z.points.mean(axis=0), 0.01))
    assert len(qs.object_points) + len(qs.robot_points) == n_obj + len(GRIPPER.radii)
    empty = GripperGeometry(np.zeros((0, 3)), np.zeros(0))
    qs0 = augment_object_cloud(Z, palm, empty, spacing=0.01)
    assert len(qs0.robot_points) == 0
    assert np.array_equal(qs0.object_points.points, qs.object_points.points)
    with pytest.raises(EmptyInputError):
        augment_object_cloud(PointCloud(np.zeros((0, 3))), palm, GRIPPER)


@settings(max_examples=30)
@given(st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-2, 2)] * 3))
def test_augment_rigid_invariance(t, rv):
    Z = _cloud(1)
    palm = Pose3.from_rotvec([0.3, 1.2, -0.2], [0.45, 0.12, 0.2])
    T = Pose3.from_rotvec(np.array(rv), t)
    a = augment_object_cloud(Z, palm, GRIPPER, spacing=1e-4)
    Zt = PointCloud(Z.points @ T.R.T + T.translation)
    b = augment_object_cloud(Zt, T.compose(palm), GRIPPER, spacing=1e-4)
    # the query frame keeps world axes, so relative geometry agrees up to the rotation of T
    assert np.allclose(b.robot_points.points, a.robot_points.points @ T.R.T, atol=1e-9)
    ia = np.lexsort(a.object_points.points.T)
    pa = a.object_points.points[ia] @ T.R.T
    pb = b.object_points.points
    assert np.allclose(pa[np.lexsort(pa.T)], pb[np.lexsort(pb.T)], atol=1e-9)


def test_arm_file_round_trip(tmp_path):
    d = arm_to_dict(ARM, GRIPPER)
    path = tmp_path / "arm.json"
    path.write_text(json.dumps(d))
    arm2, grip2 = load_arm(path)
    q = np.random.default_rng(6).uniform(ARM.lower, ARM.upper)
    assert np.allclose(fk(arm2, q).matrix(), fk(ARM, q).matrix(), atol=1e-12)
    assert np.array_equal(grip2.radii, GRIPPER.radii)
    d2 = arm_to_dict(arm2, grip2)
    assert [j["name"] for j in d2["joints"]] == [j["name"] for j in d["joints"]]
    # quaternions are renormalized on load, which may move the last bit
    assert np.allclose(d2["tool"]["rotation"], d["tool"]["rotation"], rtol=0, atol=1e-15)


def test_arm_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(FormatError):
        load_arm(bad)
    with pytest.raises(FormatError):
        arm_from_dict({"schema": "other"})
    d = arm_to_dict(ARM, GRIPPER)
    del d["gripper"]
    with pytest.raises(FormatError):
        arm_from_dict(d)
