import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_sdf, central_difference, random_blob_grid, relative_error, trilinear_loop
from pickplace.errors import EmptyInputError, EmptySceneError, FormatError, ParameterError
from pickplace.geom import OccupancyGrid, PointCloud, Pose3
from pickplace.sdf import (CollisionQuerySet, build_scene_sdf, build_sdf, collision_margin, dump_sdf,
                           load_sdf, min_sdf_over_set, query, query_points, update_sdf)

S = 0.01


def grid(occ, spacing=S, origin=(0.0, 0.0, 0.0)):
    return OccupancyGrid(np.array(origin), spacing, occ)


def single_voxel(n=9):
    occ = np.zeros((n, n, n), dtype=bool)
    occ[n // 2, n // 2, n // 2] = True
    return occ


def test_single_voxel_face_neighbors():
    s = build_sdf(grid(single_voxel()), 4 * S)
    c = 4
    for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        assert s.distance[c + d[0], c + d[1], c + d[2]] == pytest.approx(S, abs=1e-12)
    assert s.distance[c, c, c] == 0.0


def test_far_cells_clamped_to_truncation():
    s = build_sdf(grid(single_voxel(15)), 3 * S)
    assert s.distance[0, 0, 0] == 3 * S
    assert np.all(np.abs(s.distance) <= 3 * S)


def test_solid_block_center_negative():
    occ = np.zeros((11, 11, 11), dtype=bool)
    occ[3:8, 3:8, 3:8] = True
    s = build_sdf(grid(occ), 5 * S)
    assert s.distance[5, 5, 5] == pytest.approx(-2 * S, abs=1e-12)


def test_build_errors():
    with pytest.raises(EmptySceneError):
        build_sdf(grid(np.zeros((4, 4, 4), dtype=bool)))
    with pytest.raises(EmptySceneError):
        build_sdf(grid(np.ones((4, 4, 4), dtype=bool)))
    with pytest.raises(ParameterError):
        build_sdf(grid(single_voxel()), 1.5 * S)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 20))
    occ = random_blob_grid(rng, n)
    eps = 5 * S
    s = build_sdf(grid(occ), eps)
    ref = brute_force_sdf(occ, S, eps)
    band = np.abs(ref) < eps
    assert np.all(np.abs(s.distance[band] - ref[band]) <= S * math.sqrt(3))
    # the shell march is exact on the voxel lattice, not just within the bound
    assert np.allclose(s.distance, ref, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_sign_correctness(seed):
    rng = np.random.default_rng(seed)
    occ = random_blob_grid(rng, 16)
    s = build_sdf(grid(occ), 4 * S)
    assert np.all(s.distance[~occ] > 0)
    assert np.all(s.distance[occ] <= 0)
    assert np.all(np.isfinite(s.gradient))


def test_half_space_gradient():
    occ = np.zeros((20, 8, 8), dtype=bool)
    occ[:6] = True
    s = build_sdf(grid(occ), 8 * S)
    g = s.gradient[8:12, 2:6, 2:6]
    assert np.allclose(g, [1.0, 0.0, 0.0], atol=0.05)


def test_saturated_region_has_zero_gradient():
    s = build_sdf(grid(single_voxel(21)), 3 * S)
    assert np.array_equal(s.gradient[0, 0, 0], [0.0, 0.0, 0.0])


def test_gradient_above_single_voxel_points_up():
    s = build_sdf(grid(single_voxel(11)), 4 * S)
    assert s.gradient[5, 5, 7][2] > 0


def test_query_at_centers_and_midpoints():
    rng = np.random.default_rng(0)
    s = build_sdf(grid(random_blob_grid(rng, 12)), 4 * S)
    i, j, k = 4, 5, 6
    center = s.occupancy.cell_center((i, j, k))
    assert query(s, center)[0] == pytest.approx(s.distance[i, j, k], abs=1e-12)
    mid = center + [0.5 * S, 0, 0]
    want = 0.5 * (s.distance[i, j, k] + s.distance[i + 1, j, k])
    assert query(s, mid)[0] == pytest.approx(want, abs=1e-9)


def test_query_matches_trilinear_loop():
    rng = np.random.default_rng(1)
    s = build_sdf(grid(random_blob_grid(rng, 14)), 4 * S)
    P = rng.uniform(-0.01, 0.15, size=(200, 3))
    d, _ = query_points(s, P)
    ref = [trilinear_loop(s.distance, s.origin, S, p, s.eps_trunc) for p in P]
    assert np.allclose(d, ref, atol=1e-12)


def test_out_of_grid_query():
    s = build_sdf(grid(single_voxel()), 3 * S)
    d, g = query(s, [5.0, 5.0, 5.0])
    assert d == 3 * S and np.array_equal(g, np.zeros(3))


def test_query_random_points_within_bound_of_exact_distance():
    rng = np.random.default_rng(2)
    occ = random_blob_grid(rng, 16)
    eps = 5 * S
    s = build_sdf(grid(occ), eps)
    surf_centers = s.occupancy.occupied_centers()
    P = rng.uniform(0.02, 0.14, size=(300, 3))
    d, _ = query_points(s, P)
    exact = np.linalg.norm(P[:, None] - surf_centers[None], axis=2).min(axis=1)
    free = ~occ[tuple(s.occupancy.cell_index(P).T)]
    band = free & (exact < eps - 2 * S)
    assert band.sum() > 20
    assert np.all(np.abs(d[band] - exact[band]) <= S * math.sqrt(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_query_lipschitz(seed):
    rng = np.random.default_rng(seed)
    s = build_sdf(grid(random_blob_grid(rng, 12)), 4 * S)
    # stay on the lattice of voxel centers; beyond it the field is defined as +eps_trunc
    P = rng.uniform(0.009, 0.111, size=(50, 3))
    delta = np.clip(rng.normal(scale=0.003, size=(50, 3)), -0.004, 0.004)
    d0, _ = query_points(s, P)
    d1, _ = query_points(s, P + delta)
    L = math.sqrt(3) / S * s.eps_trunc
    assert np.all(np.abs(d1 - d0) <= L * np.linalg.norm(delta, axis=1) + 1e-12)


def _scene():
    rng = np.random.default_rng(3)
    P = np.vstack([rng.uniform([0, 0, 0], [0.1, 0.1, 0.05], size=(400, 3)),
                   rng.uniform([0.2, 0.0, 0], [0.25, 0.1, 0.1], size=(200, 3))])
    return build_scene_sdf(PointCloud(P), S, 5 * S)


def test_min_over_set_matches_loop_and_decomposes():
    s = _scene()
    rng = np.random.default_rng(4)
    obj = PointCloud(rng.uniform(-0.03, 0.03, size=(100, 3)))
    rob = PointCloud(rng.uniform(-0.05, 0.05, size=(4, 3)))
    q = CollisionQuerySet(obj, rob, np.full(4, 0.02))
    pose = Pose3.from_rotvec([0.1, -0.2, 0.4], (0.15, 0.05, 0.05))
    res = min_sdf_over_set(s, pose, q)
    loop = [query(s, p)[0] for p in pose.apply(obj.points)]
    loop += [query(s, p)[0] - 0.02 for p in pose.apply(rob.points)]
    assert res.distance == pytest.approx(min(loop), abs=1e-12)
    assert res.distance == min(res.object_min, res.robot_min)


def test_min_over_set_far_and_on_surface():
    s = _scene()
    q = CollisionQuerySet(PointCloud([[0.0, 0.0, 0.0]]))
    assert min_sdf_over_set(s, Pose3((9, 9, 9)), q).distance == s.eps_trunc
    idx = np.argwhere(s.distance == 0)[0]
    at = s.occupancy.cell_center(idx)
    assert min_sdf_over_set(s, Pose3(at), q).distance == 0.0
    with pytest.raises(EmptyInputError):
        min_sdf_over_set(s, Pose3(), CollisionQuerySet(PointCloud(np.zeros((0, 3)))))


def test_collision_margin_values():
    s = _scene()
    q = CollisionQuerySet(PointCloud([[0.0, 0.0, 0.0]]))
    r, _ = collision_margin(s, Pose3((9, 9, 9)), q, 0.01)
    assert r == pytest.approx(0.01 - s.eps_trunc)
    idx = np.argwhere(s.distance == 0)[0]
    r, _ = collision_margin(s, Pose3(s.occupancy.cell_center(idx)), q, 0.01)
    assert r == pytest.approx(0.01)
    with pytest.raises(ParameterError):
        collision_margin(s, Pose3(), q, -1.0)


def test_sphere_margin_identity():
    """A robot sphere enters as its center distance minus its radius."""
    s = _scene()
    center = np.array([0.15, 0.05, 0.03])
    r = 0.015
    q = CollisionQuerySet(PointCloud(np.zeros((0, 3))), PointCloud([[0.0, 0.0, 0.0]]), [r])
    got = min_sdf_over_set(s, Pose3(center), q).distance
    assert got == pytest.approx(query(s, center)[0] - r, abs=1e-12)


def _margin_fd_points(n):
    s = _scene()
    rng = np.random.default_rng(5)
    obj = PointCloud(rng.uniform(-0.02, 0.02, size=(30, 3)))
    q = CollisionQuerySet(obj)
    out = []
    while len(out) < n:
        t = rng.uniform([0.1, 0.0, 0.0], [0.2, 0.12, 0.08])
        rv = rng.normal(scale=0.5, size=3)
        x = np.concatenate([t, np.zeros(3)])
        base = Pose3.from_rotvec(rv, t)

        def f(z, base=base):
            return collision_margin(s, Pose3.from_rotvec(np.zeros(3), z[:3] - base.translation)
                                    .compose(base).compose(Pose3.from_rotvec(z[3:])), q, 0.01)[0]
        r0, g = collision_margin(s, base, q, 0.01)
        if abs(r0 - (0.01 - s.eps_trunc)) < 1e-9:
            continue
        # skip points where the minimizing point switches inside the stencil
        idx0 = min_sdf_over_set(s, base, q).index
        stable = all(min_sdf_over_set(s, Pose3.from_rotvec(np.zeros(3), dz).compose(base), q).index == idx0
                     for dz in np.eye(3) * 1e-6)
        if stable:
            out.append((f, x, g))
    return out


def test_collision_margin_gradient():
    worst = 0.0
    for f, x, g in _margin_fd_points(50):
        fd = central_difference(f, x, 1e-7)
        worst = max(worst, relative_error(g, fd))
    assert worst <= 1e-4


def _incremental_case(seed):
    rng = np.random.default_rng(seed)
    base = PointCloud(rng.uniform([0, 0, 0], [0.2, 0.2, 0.02], size=(300, 3)))
    s = build_scene_sdf(base, S, 4 * S)
    pts = [base.points]
    for _ in range(int(rng.integers(1, 9))):
        obj = PointCloud(rng.uniform(-0.02, 0.02, size=(60, 3)))
        at = Pose3.from_rotvec(rng.normal(scale=0.5, size=3), rng.uniform([0.0, 0.0, 0.03], [0.2, 0.2, 0.08]))
        s = update_sdf(s, obj, at)
        pts.append(at.apply(obj.points))
    return s


@pytest.mark.parametrize("seed", range(10))
def test_update_equals_full_rebuild(seed):
    s = _incremental_case(seed)
    fresh = build_sdf(s.occupancy, s.eps_trunc)
    assert np.array_equal(s.distance, fresh.distance)
    assert np.array_equal(s.gradient, fresh.gradient)


def test_update_idempotent_for_occupied_cloud():
    s = _scene()
    centers = PointCloud(s.occupancy.occupied_centers()[:50])
    s2 = update_sdf(s, centers, Pose3())
    assert np.array_equal(s2.distance, s.distance)


def test_update_outside_grows_grid():
    s = _scene()
    far = PointCloud(np.array([[0.5, 0.5, 0.05], [0.51, 0.5, 0.05]]))
    s2 = update_sdf(s, far, Pose3())
    assert all(a > b for a, b in zip(s2.dims[:2], s.dims[:2]))
    assert np.array_equal(build_sdf(s2.occupancy, s2.eps_trunc).distance, s2.distance)
    # the far object does not reach the original band; old values survive on the shared lattice
    off = np.round((s.origin - s2.origin) / S).astype(int)
    sub = s2.distance[off[0]:off[0] + s.dims[0], off[1]:off[1] + s.dims[1], off[2]:off[2] + s.dims[2]]
    assert np.array_equal(sub[: s.dims[0] - 10], s.distance[: s.dims[0] - 10])


def test_dump_load_round_trip(tmp_path):
    s = _scene()
    p = tmp_path / "grid.tsdf"
    dump_sdf(s, p)
    t = load_sdf(p)
    assert t.dims == s.dims and t.spacing == s.spacing and t.eps_trunc == s.eps_trunc
    assert np.allclose(t.distance, s.distance, atol=1e-7)
    assert np.array_equal(t.distance <= 0, s.distance <= 0)
    buf = io.BytesIO()
    dump_sdf(s, buf)
    assert buf.getvalue()[:5] == b"TSDF1"
    with pytest.raises(FormatError):
        load_sdf(io.BytesIO(b"XXXXX" + buf.getvalue()[5:]))
    with pytest.raises(FormatError):
        load_sdf(io.BytesIO(buf.getvalue()[:-4]))
