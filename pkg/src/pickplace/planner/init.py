"""Solver initialization: grasp candidates from the prior and placement candidates.

Planar placement candidates come from correlating, per yaw sample, the 2D
footprint of the object (and of the low-hanging gripper spheres) with the
2D occupancy of the place scene.  Cells where nothing overlaps are
collision-free candidates; they are ranked by placement cost and then
filtered by an inverse-kinematics test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from ..costs import PlacePose, placement_cost
from ..errors import InfeasibleInitError
from ..geom import Pose2, Pose3, rot_z
from ..grasp import GraspConfig, default_prior, sample_prior
from ..robot import ik_seeds, solve_ik
from .problem import Problem


@dataclass(frozen=True, eq=False)
class GraspCandidate:
    grasp: GraspConfig
    q: np.ndarray
    ik_error: float
    score: float
    label: str = ""


@dataclass(frozen=True, eq=False)
class PlaceCandidate:
    pose: Pose3
    place: PlacePose
    cost: float
    q: np.ndarray | None = None
    ik_error: float = math.inf


def grasp_relative(pb: Problem, grasp: GraspConfig) -> Pose3:
    """Palm pose in the object frame (centroid origin, world axes)."""
    return Pose3.from_rt(grasp.palm.R, grasp.palm.translation - pb.centroid)


def ik(pb: Problem, target: Pose3):
    arm = pb.spec.arm
    return solve_ik(arm, target, ik_seeds(arm, target.translation), iters=pb.spec.settings.ik_iters,
                    tol=pb.spec.settings.fk_tol)


def reachable(pb: Problem, target_position) -> bool:
    arm = pb.spec.arm
    return float(np.linalg.norm(np.asarray(target_position) - arm.shoulder())) <= arm.reach()


def grasp_candidates(pb: Problem, seed, k: int) -> list[GraspCandidate]:
    """Prior mode means (heaviest first), then the best-scoring prior samples."""
    spec = pb.spec
    prior = default_prior(pb.summary, spec.gripper, robot_base=spec.arm.base.translation)
    model = spec.grasp_model
    order = sorted(range(len(prior.components)), key=lambda i: (-prior.components[i].weight, i))
    from ..grasp import grasp_from_object_frame

    pool = [(grasp_from_object_frame(prior.components[i].mean, pb.summary, prior.preshape_bounds),
             prior.components[i].label) for i in order]
    samples = sample_prior(prior, pb.summary, spec.settings.prior_samples, seed)
    scored = sorted(((-model.success(g, pb.summary), i) for i, g in enumerate(samples)))
    pool += [(samples[i], "sample") for _, i in scored]
    out = []
    for g, label in pool:
        if len(out) >= k:
            break
        q, err = ik(pb, g.palm)
        out.append(GraspCandidate(g, q, err, model.success(g, pb.summary), label))
    return out


# ---------------------------------------------------------------------------
# planar placement prior
# ---------------------------------------------------------------------------

def _disk_offsets(radius_cells: float) -> np.ndarray:
    r = int(math.ceil(radius_cells))
    ax = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    return off[(off ** 2).sum(axis=1) <= radius_cells ** 2 + 1e-9]


def footprint_offsets(pb: Problem, grasp: GraspConfig, yaw: float, cell: float):
    """Cell offsets covered by the object and by the low gripper spheres at ``yaw``.

    The object footprint is dilated by the collision margin.  Only spheres
    that dip below the top of the place-scene clutter can hit it from
    above, so the others are ignored.
    """
    spec = pb.spec
    Rz = rot_z(yaw)
    obj = pb.object_local.points @ Rz.T
    cells = np.unique(np.round(obj[:, :2] / cell).astype(np.int64), axis=0)
    dil = _disk_offsets(spec.margin / cell)
    obj_off = np.unique((cells[:, None, :] + dil[None, :, :]).reshape(-1, 2), axis=0)

    rel = grasp_relative(pb, grasp)
    centers = (rel.translation + spec.gripper.centers @ rel.R.T) @ Rz.T
    scene = spec.place_scene.points
    top = float(scene[:, 2].max()) if len(scene) else -math.inf
    rob = []
    for c, r in zip(centers, spec.gripper.radii):
        if pb.place_z + c[2] - r - spec.margin <= top:
            ctr = np.round(c[:2] / cell).astype(np.int64)
            rob.append(_disk_offsets((r + spec.margin) / cell) + ctr)
    rob_off = np.unique(np.vstack(rob), axis=0) if rob else np.zeros((0, 2), dtype=np.int64)
    return obj_off, rob_off


@dataclass(frozen=True, eq=False)
class PlacementGrid:
    """2D cells over the placement surface plus a margin; ``x_i = x0 + (i + 0.5) * cell``."""

    x0: float
    y0: float
    cell: float
    clutter: np.ndarray
    outside: np.ndarray

    def centers(self):
        nx, ny = self.clutter.shape
        xs = self.x0 + (np.arange(nx) + 0.5) * self.cell
        ys = self.y0 + (np.arange(ny) + 0.5) * self.cell
        return xs, ys


def placement_grid(pb: Problem, margin_cells: int) -> PlacementGrid:
    sf = pb.spec.surface
    cell = pb.spec.sdf_spacing
    x0 = sf.xmin - margin_cells * cell
    y0 = sf.ymin - margin_cells * cell
    nx = int(math.ceil((sf.xmax - sf.xmin) / cell)) + 2 * margin_cells
    ny = int(math.ceil((sf.ymax - sf.ymin) / cell)) + 2 * margin_cells
    clutter = np.zeros((nx, ny), dtype=bool)
    P = pb.spec.place_scene.points
    if len(P):
        idx = np.floor((P[:, :2] - (x0, y0)) / cell).astype(np.int64)
        ok = (idx[:, 0] >= 0) & (idx[:, 0] < nx) & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        clutter[idx[ok, 0], idx[ok, 1]] = True
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    outside = ~(((xs >= sf.xmin) & (xs <= sf.xmax))[:, None] & ((ys >= sf.ymin) & (ys <= sf.ymax))[None, :])
    return PlacementGrid(x0, y0, cell, clutter, outside)


def _kernel(offsets: np.ndarray, radius: int) -> np.ndarray:
    K = np.zeros((2 * radius + 1, 2 * radius + 1))
    if len(offsets):
        K[offsets[:, 0] + radius, offsets[:, 1] + radius] = 1.0
    return K


def overlap_counts(mask: np.ndarray, offsets: np.ndarray, radius: int) -> np.ndarray:
    """For every cell, how many footprint offsets land on ``mask`` (cells outside count as free)."""
    if len(offsets) == 0:
        return np.zeros(mask.shape)
    K = _kernel(offsets, radius)
    out = signal.correlate(mask.astype(float), K, mode="same", method="fft")
    return np.rint(out)


def collision_free_cells(pb: Problem, grasp: GraspConfig, yaws, grid: PlacementGrid | None = None):
    """Boolean candidate masks, one per yaw, and the grid they refer to."""
    offs = [footprint_offsets(pb, grasp, y, pb.spec.sdf_spacing) for y in yaws]
    radius = max(int(np.abs(np.vstack([o for pair in offs for o in pair if len(o)])).max()), 1)
    if grid is None:
        grid = placement_grid(pb, radius)
    xs, ys = grid.centers()
    in_bounds = ((xs >= pb.lower[0]) & (xs <= pb.upper[0]))[:, None] & \
        ((ys >= pb.lower[1]) & (ys <= pb.upper[1]))[None, :]
    obj_mask = grid.clutter | grid.outside
    masks = []
    for obj_off, rob_off in offs:
        free = (overlap_counts(obj_mask, obj_off, radius) == 0) & \
            (overlap_counts(grid.clutter, rob_off, radius) == 0) & in_bounds
        masks.append(free)
    return masks, grid


def _batch_planar_cost(pb: Problem, x, y, yaw):
    """Hard placement cost for many planar poses sharing one yaw (vectorized)."""
    task = pb.spec.task
    if task.kind == "target":
        t = task.target
        dth = np.remainder(t.theta - yaw + math.pi, 2 * math.pi) - math.pi
        return 0.5 * ((t.x - x) ** 2 + (t.y - y) ** 2 + dth ** 2)
    if task.kind == "inline":
        c, s = math.cos(task.line_angle), math.sin(task.line_angle)
        r = c * (x - task.target[0]) - s * (y - task.target[1])
        return r * r
    if task.kind == "pack":
        O = pb.object_local.points[:, :2] @ rot_z(yaw)[:2, :2].T
        E = pb.spec.place_scene.points[:, :2]
        if len(E) == 0:
            E = np.array([task.ref])
        emin, emax = E.min(axis=0), E.max(axis=0)
        omin, omax = O.min(axis=0), O.max(axis=0)
        L = np.maximum(emax[0], x + omax[0]) - np.minimum(emin[0], x + omin[0])
        W = np.maximum(emax[1], y + omax[1]) - np.minimum(emin[1], y + omin[1])
        L_O, W_O = np.ptp(pb.object_local.points[:, 0]), np.ptp(pb.object_local.points[:, 1])
        c, s = math.cos(yaw), math.sin(yaw)
        t2 = (c + s) * L_O + (c - s) * W_O + (x - task.ref[0]) + (y - task.ref[1])
        return task.area_weight * L * W + task.length_weight * t2
    raise ValueError(f"no planar batch cost for {task.kind!r}")


def _candidate_ranked(pb: Problem, grasp: GraspConfig, yaws):
    masks, grid = collision_free_cells(pb, grasp, yaws)
    xs, ys = grid.centers()
    recs = []
    for k, (yaw, m) in enumerate(zip(yaws, masks)):
        ii, jj = np.nonzero(m)
        if len(ii) == 0:
            continue
        cost = _batch_planar_cost(pb, xs[ii], ys[jj], yaw)
        recs.append(np.column_stack([cost, np.full(len(ii), k), ii, jj]))
    if not recs:
        return np.zeros((0, 4)), grid
    R = np.vstack(recs)
    order = np.lexsort((R[:, 3], R[:, 2], R[:, 1], R[:, 0]))
    return R[order], grid


def _spatial_candidates(pb: Problem, grasp: GraspConfig):
    """Stacking seeds: the 24 axis-aligned orientations, dropped onto the stack at ``x_c``."""
    spec = pb.spec
    task = spec.task
    xc = np.asarray(task.stack_base, dtype=float)
    scene = spec.place_scene.points
    rel = grasp_relative(pb, grasp)
    out = []
    for R in cube_rotations():
        V = pb.object_local.points @ R.T
        lo, hi = V[:, :2].min(axis=0) + xc[:2], V[:, :2].max(axis=0) + xc[:2]
        under = scene[np.all((scene[:, :2] >= lo - spec.sdf_spacing) & (scene[:, :2] <= hi + spec.sdf_spacing), axis=1)] \
            if len(scene) else scene
        top = float(under[:, 2].max()) if len(under) else spec.surface.z
        z = top - float(V[:, 2].min()) + spec.margin + spec.settings.collision_tol + spec.sdf_spacing
        pose = Pose3.from_rt(R, (xc[0], xc[1], z))
        pp = PlacePose(pose)
        H, _ = placement_cost(pp, pb.ctx, task)
        W = pose.apply(pb.object_query)
        d_obj, _ = pb._distances(pb.place_sdf, W, spec.surface.z)
        palm = pose.compose(rel)
        d_rob, _ = pb._distances(pb.place_sdf, palm.apply(spec.gripper.centers), spec.surface.z)
        if d_obj.min() < spec.margin or (d_rob - spec.gripper.radii).min() < spec.margin:
            continue
        out.append((H, len(out), pose))
    out.sort(key=lambda r: (r[0], r[1]))
    return out


def cube_rotations() -> list[np.ndarray]:
    """The 24 proper rotations mapping coordinate axes to coordinate axes."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            M = np.zeros((3, 3))
            for i, (j, s) in enumerate(zip(perm, signs)):
                M[i, j] = s
            if np.linalg.det(M) > 0:
                mats.append(M)
    return mats


def init_place_prior(pb: Problem, grasp: GraspConfig, top_k: int | None = 2, kinematic: bool = True,
                     max_checks: int = 60, min_separation: float = 0.04,
                     fail_radius: float = 0.1) -> list[PlaceCandidate]:
    """Ranked collision-free placement candidates for a fixed grasp.

    With ``kinematic`` the ranked list is walked in order and each
    candidate is kept only if the palm pose it implies passes a quick reach
    test and a damped least-squares IK solve; at most ``max_checks`` are
    tried and ``top_k`` kept.  After a failed solve, candidates with the
    same orientation within ``fail_radius`` of it are skipped.  Without it, every collision-free candidate
    is returned ranked (no IK).

    Raises ``InfeasibleInitError`` when no collision-free candidate exists.
    """
    spec = pb.spec
    rel = grasp_relative(pb, grasp)
    if pb.spatial:
        recs = _spatial_candidates(pb, grasp)
        if not recs:
            raise InfeasibleInitError("no collision-free stacking orientation")
        cands = [PlaceCandidate(p, PlacePose(p), H) for H, _, p in recs]
    else:
        yaws = [2 * math.pi * k / spec.settings.yaw_samples for k in range(spec.settings.yaw_samples)]
        R, grid = _candidate_ranked(pb, grasp, yaws)
        if len(R) == 0:
            raise InfeasibleInitError("no collision-free placement cell")
        xs, ys = grid.centers()
        cands = (PlaceCandidate(Pose3.from_rt(rot_z(yaws[int(k)]), (float(xs[int(i)]), float(ys[int(j)]), pb.place_z)),
                                PlacePose(Pose2(float(xs[int(i)]), float(ys[int(j)]), yaws[int(k)])), float(cost))
                 for cost, k, i, j in R)
    if not kinematic:
        return list(cands)
    kept: list[PlaceCandidate] = []
    kept_t: list[np.ndarray] = []
    # failed translations grouped by orientation
    failed_t: dict[tuple, list[np.ndarray]] = {}
    checks = 0
    for c in cands:
        if top_k is not None and len(kept) >= top_k:
            break
        if checks >= max_checks:
            break
        t = c.pose.translation
        if _near(kept_t, t, min_separation):
            continue
        # IK failures are strongly correlated in space at fixed orientation
        okey = tuple(np.round(c.pose.rotation, 9) + 0.0)
        if _near(failed_t.get(okey, ()), t, fail_radius):
            continue
        palm = c.pose.compose(rel)
        if not reachable(pb, palm.translation):
            continue
        checks += 1
        q, err = ik(pb, palm)
        if err <= spec.settings.fk_tol:
            kept.append(PlaceCandidate(c.pose, c.place, c.cost, q, err))
            kept_t.append(t)
        else:
            failed_t.setdefault(okey, []).append(t)
    return kept


def _near(points, t: np.ndarray, radius: float) -> bool:
    if len(points) == 0:
        return False
    return bool(np.min(np.linalg.norm(np.asarray(points) - t, axis=1)) < radius)
