import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, relative_error
from pickplace.costs import (PlacementContext, PlacePose, TaskParams, cost_inline, cost_pack, cost_stack,
                             cost_target, likelihood_from_cost, line_deviation, object_extents,
                             pack_area_growth, placement_cost, placement_likelihood)
from pickplace.errors import DegenerateGeometryError, EmptyInputError, ParameterError
from pickplace.geom import PointCloud, Pose2, Pose3, rot_z, so3_exp


def box_points(L, W, H, n=6):
    g = np.stack(np.meshgrid(np.linspace(-L / 2, L / 2, n), np.linspace(-W / 2, W / 2, n),
                             np.linspace(-H / 2, H / 2, n), indexing="ij"), -1).reshape(-1, 3)
    return PointCloud(g)


def planar(z):
    return PlacePose.planar(z[0], z[1], z[2])


def spatial_at(base: Pose3, z):
    """Right-perturbed spatial pose: translation offset plus rotation increment."""
    return PlacePose.spatial(Pose3.from_rt(base.R @ so3_exp(z[3:]), base.translation + z[:3]))


# -- likelihood bridge ------------------------------------------------------

def test_likelihood_from_cost_values():
    assert likelihood_from_cost(0.0, 3.0) == 1.0
    assert likelihood_from_cost(1.0, 1.0) == pytest.approx(0.36787944117144233)
    with pytest.raises(ParameterError):
        likelihood_from_cost(1.0, 0.0)


@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=40),
       st.floats(1e-3, 1e3))
def test_likelihood_preserves_argmin(H, alpha):
    G = [likelihood_from_cost(h, alpha) for h in H]
    assert G[int(np.argmax(G))] == likelihood_from_cost(min(H), alpha)
    # the ordering is strict wherever the exponentials stay distinguishable
    i, j = int(np.argmin(H)), int(np.argmax(H))
    assert G[i] >= G[j]


# -- target -----------------------------------------------------------------

def test_target_examples():
    t = Pose2(0.3, -0.2, 1.0)
    v, g = cost_target(PlacePose(t), t)
    assert v == 0.0 and np.array_equal(g, np.zeros(3))
    assert likelihood_from_cost(v, 1.0) == 1.0
    v, _ = cost_target(PlacePose.planar(1.3, -0.2, 1.0), t)
    assert v == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        cost_target(PlacePose.spatial(Pose3()), t)


@given(st.tuples(*[st.floats(-2, 2)] * 3), st.tuples(*[st.floats(-2, 2)] * 3))
def test_target_nonnegative_and_zero_only_at_target(a, b):
    pa, pb = Pose2(*a), Pose2(*b)
    v, _ = cost_target(PlacePose(pa), pb)
    assert v >= 0
    gap = max(abs(pa.x - pb.x), abs(pa.y - pb.y), abs(math.remainder(pa.theta - pb.theta, 2 * math.pi)))
    if gap == 0:
        assert v == 0
    else:
        # squares of gaps below ~1e-154 underflow to zero
        assert v > 0 or gap < 1e-150


def test_target_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        t = Pose2(*rng.uniform(-1, 1, 3))
        z = rng.uniform(-1, 1, 3)
        _, g = cost_target(planar(z), t)
        worst = max(worst, relative_error(g, central_difference(lambda u: cost_target(planar(u), t)[0], z)))
        T = Pose3.from_rotvec(rng.normal(size=3), rng.normal(size=3))
        base = Pose3.from_rotvec(rng.normal(size=3), rng.normal(size=3))
        _, g = cost_target(PlacePose.spatial(base), T)
        fd = central_difference(lambda u: cost_target(spatial_at(base, u), T)[0], np.zeros(6))
        worst = max(worst, relative_error(g, fd))
    # central differences lose digits near the rotation-log cut at pi
    assert worst <= 1e-4


# -- packing ----------------------------------------------------------------

def test_pack_identity_second_term():
    O = box_points(0.2, 0.1, 0.05)
    E = PointCloud([[0.0, 0.0, 0.0]])
    v, _ = cost_pack(PlacePose.planar(0, 0, 0), O, E, length_weight=1.0, area_weight=0.0)
    assert v == pytest.approx(0.2 + 0.1, abs=1e-12)


def test_pack_inside_vs_outside_footprint():
    O = box_points(0.1, 0.1, 0.05)
    E = PointCloud(np.vstack([box_points(0.6, 0.6, 0.1).points]))
    area0 = 0.6 * 0.6
    inside = PlacePose.planar(0.05, 0.05, 0.3)
    outside = PlacePose.planar(0.6, 0.0, 0.0)
    assert pack_area_growth(inside, O, E) == 0.0
    assert pack_area_growth(outside, O, E) > 0.0
    v_in, _ = cost_pack(inside, O, E, length_weight=0.0)
    v_out, _ = cost_pack(outside, O, E, length_weight=0.0)
    assert v_in == pytest.approx(area0, abs=1e-12)
    assert v_out > area0


def test_pack_likelihood_one_iff_no_growth():
    O = box_points(0.1, 0.1, 0.05)
    E = box_points(0.6, 0.6, 0.1)
    task = TaskParams("pack", 5.0)
    ctx = PlacementContext(O, E)
    assert placement_likelihood(PlacePose.planar(0.0, 0.0, 0.0), ctx, task) == 1.0
    assert placement_likelihood(PlacePose.planar(0.8, 0.0, 0.0), ctx, task) < 1.0


def test_pack_errors():
    O = box_points(0.1, 0.1, 0.05)
    with pytest.raises(ParameterError):
        cost_pack(PlacePose.spatial(Pose3()), O, O)
    with pytest.raises(EmptyInputError):
        cost_pack(PlacePose.planar(0, 0, 0), O, PointCloud(np.zeros((0, 3))))


def test_pack_smooth_gradients():
    rng = np.random.default_rng(1)
    O = PointCloud(rng.uniform(-0.05, 0.05, size=(40, 3)))
    E = PointCloud(rng.uniform(-0.3, 0.3, size=(60, 3)))
    worst = 0.0
    for _ in range(50):
        z = np.array([*rng.uniform(-0.4, 0.4, 2), rng.uniform(-3, 3)])

        def f(u):
            return cost_pack(planar(u), O, E, (0.1, -0.1), 100.0, smooth=True)[0]
        _, g = cost_pack(planar(z), O, E, (0.1, -0.1), 100.0, smooth=True)
        worst = max(worst, relative_error(g, central_difference(f, z)))
    assert worst <= 1e-4


# -- stacking ---------------------------------------------------------------

def test_stack_identity_equals_length_plus_height():
    rng = np.random.default_rng(2)
    for _ in range(20):
        L, W, H = rng.uniform(0.02, 0.3, 3)
        v, _ = cost_stack(PlacePose.spatial(Pose3((0.1, 0.2, 0.3))), np.array([L, W, H]), (0.1, 0.2, 0.3))
        assert v == L + H


def test_stack_lays_tall_box_down():
    ext = np.array([0.05, 0.04, 0.2])
    ident, _ = cost_stack(PlacePose.spatial(Pose3()), ext, np.zeros(3))
    best = math.inf
    grid = np.arange(8) * math.pi / 4
    from pickplace.geom import rot_x, rot_y
    for a in grid:
        for b in grid:
            for c in grid:
                R = rot_x(a) @ rot_y(b) @ rot_z(c)
                best = min(best, cost_stack(PlacePose.spatial(Pose3.from_rt(R, np.zeros(3))), ext, np.zeros(3))[0])
    assert best <= ident
    # the minimizer puts the long axis horizontal, across the unpenalized y direction
    assert best == pytest.approx(0.04 + 0.05, abs=0.02)


def test_stack_yaw_invariant_for_square_footprint():
    ext = np.array([0.08, 0.08, 0.03])
    ref = cost_stack(PlacePose.spatial(Pose3()), ext, np.zeros(3))[0]
    # elementwise |R| on a square box: yaw by any multiple of a quarter turn is a symmetry
    for k in range(4):
        R = rot_z(k * math.pi / 2)
        assert cost_stack(PlacePose.spatial(Pose3.from_rt(R, np.zeros(3))), ext, np.zeros(3))[0] == \
            pytest.approx(ref, abs=1e-12)


def test_stack_errors():
    with pytest.raises(ParameterError):
        cost_stack(PlacePose.planar(0, 0, 0), np.ones(3), np.zeros(3))
    with pytest.raises(DegenerateGeometryError):
        cost_stack(PlacePose.spatial(Pose3()), np.array([0.1, 0.0, 0.1]), np.zeros(3))
    with pytest.raises(DegenerateGeometryError):
        object_extents(PointCloud([[0, 0, 0], [1, 1, 0]]))


def test_stack_gradients():
    rng = np.random.default_rng(3)
    ext = np.array([0.12, 0.07, 0.04])
    xc = np.array([0.5, -0.3, 0.1])
    worst_smooth = worst_hard = 0.0
    for _ in range(50):
        base = Pose3.from_rotvec(rng.normal(size=3), xc + rng.normal(scale=0.05, size=3))
        _, g = cost_stack(PlacePose.spatial(base), ext, xc, smooth=1e-3)
        fd = central_difference(lambda u: cost_stack(spatial_at(base, u), ext, xc, smooth=1e-3)[0], np.zeros(6))
        worst_smooth = max(worst_smooth, relative_error(g, fd))
        _, g = cost_stack(PlacePose.spatial(base), ext, xc)
        fd = central_difference(lambda u: cost_stack(spatial_at(base, u), ext, xc)[0], np.zeros(6))
        worst_hard = max(worst_hard, relative_error(g, fd))
    assert worst_smooth <= 1e-4
    # random rotations keep every |R| entry away from its kink at zero
    assert worst_hard <= 1e-4


def test_stack_factored_mode():
    ext = np.array([0.1, 0.05, 0.2])
    v, _ = cost_stack(PlacePose.spatial(Pose3()), ext, np.zeros(3), mode="factored")
    assert v == pytest.approx(0.1 + 0.2)


# -- inline -----------------------------------------------------------------

def test_inline_examples():
    v, _ = cost_inline(PlacePose.planar(0.0, 5.0, 0.3), (0.0, 0.0), 0.0)
    assert v == 0.0
    v, _ = cost_inline(PlacePose.planar(3.0, 0.0, 0.0), (0.0, 0.0), 0.0)
    assert v == 9.0
    assert likelihood_from_cost(v, 1.0) == pytest.approx(math.exp(-9))


@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3))
def test_inline_rotation_conjugation(theta_l, dx, dy, phi):
    v0, _ = cost_inline(PlacePose.planar(dx, dy, 0.0), (0.0, 0.0), theta_l)
    # K = Rz(t)^T Kx Rz(t): rotating the line by -phi and the offset by +phi... both by Rz(phi)^T
    R = rot_z(phi)[:2, :2]
    d = R.T @ np.array([dx, dy])
    v1, _ = cost_inline(PlacePose.planar(d[0], d[1], 0.0), (0.0, 0.0), theta_l + phi)
    assert v1 == pytest.approx(v0, abs=1e-9)


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1))
def test_inline_invariant_along_line(theta_l, s, px, py):
    direction = np.array([math.sin(theta_l), math.cos(theta_l)])
    a, _ = cost_inline(PlacePose.planar(px, py, 0.0), (0.2, -0.1), theta_l)
    q = np.array([px, py]) + s * direction
    t = np.array([0.2, -0.1]) + s * direction
    b, _ = cost_inline(PlacePose.planar(q[0], q[1], 0.0), t, theta_l)
    assert b == pytest.approx(a, abs=1e-9)
    assert line_deviation([px, py], (0.2, -0.1), theta_l) ** 2 == pytest.approx(a, abs=1e-12)


def test_inline_gradients():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        z = rng.uniform(-1, 1, 3)
        xt, th = rng.uniform(-1, 1, 2), rng.uniform(-3, 3)
        _, g = cost_inline(planar(z), xt, th)
        fd = central_difference(lambda u: cost_inline(planar(u), xt, th)[0], z)
        worst = max(worst, relative_error(g, fd))
    assert worst <= 1e-6


# -- dispatch ---------------------------------------------------------------

def test_task_params_validation():
    with pytest.raises(ParameterError):
        TaskParams("bogus")
    with pytest.raises(ParameterError):
        TaskParams("target", alpha=0.0)


def test_placement_cost_dispatch_and_likelihood():
    O = box_points(0.1, 0.06, 0.04)
    ctx = PlacementContext(O)
    t = Pose2(0.5, -0.4, 0.2)
    task = TaskParams("target", 2.0, t)
    x = PlacePose.planar(0.6, -0.4, 0.2)
    assert placement_cost(x, ctx, task)[0] == pytest.approx(0.005)
    assert placement_likelihood(x, ctx, task) == pytest.approx(math.exp(-2.0 * 0.005))
    assert placement_likelihood(PlacePose(t), ctx, task) == 1.0
