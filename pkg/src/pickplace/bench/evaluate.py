"""Desk-scale success proxies for solved pick-and-place instances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import MultiPoint, Point, Polygon

from ..geom import Pose3
from ..costs import placement_likelihood
from ..planner.problem import Problem, Solution, check_constraints
from .scenes import SceneFile, SceneObject, footprint, object_points

FAILURE_REASONS = ("none", "solver_infeasible", "grasp_score", "grasp_collision", "place_collision",
                   "off_surface", "unsupported")


@dataclass(frozen=True)
class EvalThresholds:
    grasp_success: float = 0.5
    support_fraction: float = 0.6
    # how far above its support an object may rest and still count as resting on it
    contact_gap: float = 0.02


@dataclass
class EvalReport:
    grasp_success: bool
    place_success: bool
    likelihood: float
    reason: str
    wall_times: dict = field(default_factory=dict)
    placed: SceneObject | None = None

    @property
    def success(self) -> bool:
        return self.grasp_success and self.place_success


def placed_object(obj: SceneObject, pb: Problem, place_pose: Pose3) -> SceneObject:
    """True geometry of ``obj`` after the solved placement.

    The placement maps the object frame (origin at the observed centroid,
    world-aligned axes at grasp time) to ``place_pose``.
    """
    to_frame = Pose3(-pb.centroid)
    return obj.at(place_pose.compose(to_frame).compose(obj.pose))


def _rect(surface) -> Polygon:
    return Polygon([(surface.xmin, surface.ymin), (surface.xmax, surface.ymin),
                    (surface.xmax, surface.ymax), (surface.xmin, surface.ymax)])


def support_check(placed: SceneObject, surface, others, stacking: bool,
                  th: EvalThresholds = EvalThresholds()) -> bool:
    """Is the placed object supported from below?

    The support is the highest object (or the surface itself) whose top is
    within ``contact_gap`` of the placed object's bottom and which lies
    under it.  On the surface the supported fraction of the footprint must
    reach ``support_fraction``; for stacks the center of mass must project
    inside the supporter's footprint.
    """
    P = object_points(placed, full=True, spacing=0.01)
    bottom = float(P[:, 2].min())
    fp = MultiPoint([tuple(p) for p in P[:, :2]]).convex_hull
    com = placed.center()
    best = None
    for o in others:
        top = o.z + o.height if o.rotation is None else float(object_points(o, full=True, spacing=0.01)[:, 2].max())
        if abs(bottom - top) <= th.contact_gap and footprint(o).intersects(fp):
            if best is None or top > best[0]:
                best = (top, o)
    if best is None:
        if abs(bottom - surface.z) > th.contact_gap:
            return False
        support = _rect(surface)
    else:
        support = footprint(best[1])
    if stacking:
        return bool(support.contains(Point(com[0], com[1])))
    return fp.area > 0 and support.intersection(fp).area / fp.area >= th.support_fraction


def evaluate(sol: Solution, scene: SceneFile, pb: Problem, placed_before=(),
             th: EvalThresholds = EvalThresholds()) -> EvalReport:
    """Success flags and reported likelihood for one solution.

    Grasp success: surrogate score at least ``grasp_success`` and no
    grasp-side collision.  Place success: no place-side collision, the true
    footprint inside the surface and the support check.  Failed instances
    report likelihood 0.
    """
    times = dict(sol.stage_times)
    times["total"] = sol.wall_time
    if not sol.feasible or len(sol.q_grasp) == 0:
        return EvalReport(False, False, 0.0, "solver_infeasible", times)
    res = check_constraints(sol, pb.spec, pb)
    score = pb.spec.grasp_model.success(sol.grasp, pb.summary)
    grasp_ok = score >= th.grasp_success and res["collision_grasp_robot"] <= 0.0
    placed = placed_object(scene.target, pb, sol.place_pose)
    reason = "none"
    if not grasp_ok:
        reason = "grasp_score" if score < th.grasp_success else "grasp_collision"
    place_ok = True
    if res["collision_place_union"] > 0.0:
        place_ok, reason = False, reason if reason != "none" else "place_collision"
    elif not _rect(pb.spec.surface).buffer(1e-9).contains(footprint(placed)) and not pb.spatial:
        place_ok, reason = False, reason if reason != "none" else "off_surface"
    elif not support_check(placed, pb.spec.surface, tuple(scene.objects) + tuple(placed_before),
                           pb.spatial, th):
        place_ok, reason = False, reason if reason != "none" else "unsupported"
    lik = 0.0
    if grasp_ok and place_ok:
        lik = float(np.clip(placement_likelihood(sol.place, pb.ctx, pb.spec.task), 0.0, 1.0))
    return EvalReport(bool(grasp_ok), bool(place_ok), lik, reason, times, placed)
