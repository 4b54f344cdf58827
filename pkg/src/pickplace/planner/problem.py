"""Problem specification, decision-variable layout and the joint evaluator.

Decision variables, in order:

* placement ``x_p``: ``(x, y, yaw)`` for planar tasks (height fixed so the
  object rests on the surface), ``(translation, rotation increment)`` for
  spatial tasks;
* grasp ``theta_g``: palm position relative to the object centroid,
  palm rotation increment, finger preshape;
* grasp joints ``q_g`` and place joints ``q_p``.

Rotations are stored as a base rotation times ``exp(increment)``; the
solver re-centers the increments between outer iterations.

The object frame used at placement has its origin at the object centroid
and axes parallel to the world at grasp time, so placing means mapping
that frame to ``x_p``.  The palm rides along rigidly:
``palm_place = x_p * (R_g, p_rel)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from ..costs import (
    PlacementContext,
    PlacePose,
    TaskParams,
    likelihood_from_cost,
    object_extents,
    placement_cost,
    placement_likelihood,
)
from ..errors import ParameterError
from ..geom import PointCloud, Pose2, Pose3, downsample, hat, right_jacobian, rot_z, so3_exp, so3_log
from ..grasp import GraspConfig, ObjectSummary, SurrogateGraspModel, summarize_object
from ..robot import ArmModel, GripperGeometry, default_arm, fk_residual_rt
from ..sdf import TruncatedSdf, build_scene_sdf, query_points
from .optim import AlSettings, LbfgsSettings

_EZ = np.array([0.0, 0.0, 1.0])

EQ_NAMES = tuple(f"fk_grasp_{k}" for k in range(6)) + tuple(f"fk_place_{k}" for k in range(6))
IN_NAMES = ("collision_place_object", "collision_place_robot", "collision_grasp_robot",
            "footprint_outside")


@dataclass(frozen=True)
class PlacementSurface:
    """Axis-aligned table top: x-y rectangle at height ``z``."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    z: float = 0.0

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ParameterError("placement surface must have positive area")

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)])

    def contains(self, xy, margin: float = 0.0) -> bool:
        x, y = xy[0], xy[1]
        return (self.xmin + margin <= x <= self.xmax - margin
                and self.ymin + margin <= y <= self.ymax - margin)


@dataclass(frozen=True)
class SolverSettings:
    al: AlSettings = field(default_factory=AlSettings)
    restarts: int = 8
    grasp_inits: int = 4
    place_inits: int = 2
    fk_tol: float = 1e-3
    collision_tol: float = 1e-3
    fk_pos_scale: float = 0.1
    fk_rot_scale: float = 0.5
    collision_scale: float = 0.01
    position_scale: float = 0.1
    place_clearance: float = 0.002
    prior_samples: int = 32
    yaw_samples: int = 16
    ik_iters: int = 100
    sampling_refine_steps: int = 5


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    object_cloud: PointCloud
    place_scene: PointCloud
    surface: PlacementSurface
    task: TaskParams
    grasp_table_z: float = 0.0
    grasp_clutter: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3))))
    grasp_model: object = None
    arm: ArmModel | None = None
    gripper: GripperGeometry | None = None
    sdf_spacing: float = 0.01
    eps_trunc: float | None = None
    margin: float = 0.01
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.margin < 0:
            raise ParameterError("collision margin must be non-negative")
        if self.arm is None or self.gripper is None:
            arm, gripper = default_arm()
            object.__setattr__(self, "arm", self.arm or arm)
            object.__setattr__(self, "gripper", self.gripper or gripper)
        if self.grasp_model is None:
            object.__setattr__(self, "grasp_model", SurrogateGraspModel(self.gripper))

    @property
    def spatial(self) -> bool:
        return self.task.spatial


@dataclass(frozen=True, eq=False)
class Configuration:
    """A full assignment of the decision variables as poses and joint vectors."""

    place: Pose3
    grasp: GraspConfig
    q_grasp: np.ndarray
    q_place: np.ndarray


@dataclass(frozen=True, eq=False)
class Solution:
    grasp: GraspConfig
    place: PlacePose
    place_pose: Pose3
    q_grasp: np.ndarray
    q_place: np.ndarray
    objective: float
    grasp_score: float
    place_cost: float
    residuals: dict
    feasible: bool
    status: str
    method: str
    reason: str = ""
    outer_iterations: int = 0
    inner_iterations: int = 0
    evaluations: int = 0
    wall_time: float = 0.0
    restart: int = -1
    stage_times: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def infeasible_solution(method: str, reason: str, wall_time: float = 0.0, **extra) -> Solution:
    """Placeholder returned when no configuration at all could be produced."""
    nan = float("nan")
    g = GraspConfig(Pose3(), 0.0)
    return Solution(g, PlacePose(Pose2()), Pose3(), np.zeros(0), np.zeros(0), math.inf, 0.0, nan,
                    {}, False, "infeasible", method, reason, wall_time=wall_time, **extra)


def _hull_vertices(P: np.ndarray) -> np.ndarray:
    """Convex hull vertices (every horizontal extreme of any rotation is among them)."""
    try:
        return P[ConvexHull(P).vertices]
    except QhullError:
        return P


class Problem:
    """Precomputed geometry and the differentiable evaluator for one spec."""

    def __init__(self, spec: ProblemSpec, place_sdf: TruncatedSdf | None = None):
        """``place_sdf`` may carry a field that is already up to date with the
        place scene (e.g. maintained incrementally); otherwise one is built."""
        self.spec = spec
        st = spec.settings
        Z = spec.object_cloud
        self.summary: ObjectSummary = summarize_object(Z)
        self.centroid = self.summary.centroid
        local = Z.points - self.centroid
        self.object_local = PointCloud(local, "object")
        self.object_query = downsample(local, spec.sdf_spacing)
        self.extents = object_extents(self.object_local)
        self.below = float(-local[:, 2].min())
        self.footprint_radius = float(np.linalg.norm(local[:, :2], axis=1).max())
        self.hull_points = _hull_vertices(local)
        self.place_z = spec.surface.z + self.below + st.place_clearance
        self.ctx = PlacementContext(self.object_local, spec.place_scene, self.extents)
        self.place_sdf = place_sdf if place_sdf is not None else self._scene_sdf(spec.place_scene)
        self.grasp_sdf = self._scene_sdf(spec.grasp_clutter)
        self.eps_solver = spec.margin + st.collision_tol
        self.spatial = spec.spatial
        self.n_place = 6 if self.spatial else 3
        n = spec.arm.n
        self.sl_place = slice(0, self.n_place)
        self.sl_grasp = slice(self.n_place, self.n_place + 7)
        self.sl_qg = slice(self.n_place + 7, self.n_place + 7 + n)
        self.sl_qp = slice(self.n_place + 7 + n, self.n_place + 7 + 2 * n)
        self.size = self.n_place + 7 + 2 * n
        self.lower, self.upper = self._bounds()
        scale = np.ones(self.size)
        scale[self.sl_grasp][:3] = st.position_scale
        if self.spatial:
            scale[:3] = st.position_scale
        else:
            scale[:2] = st.position_scale
        self.scale = scale
        self.eq_scale = np.array(([st.fk_pos_scale] * 3 + [st.fk_rot_scale] * 3) * 2)
        self.in_scale = np.full(4, st.collision_scale)

    def _scene_sdf(self, cloud: PointCloud) -> TruncatedSdf | None:
        if cloud.is_empty:
            return None
        return build_scene_sdf(cloud, self.spec.sdf_spacing, self.spec.eps_trunc)

    @property
    def eps_trunc(self) -> float:
        s = self.spec
        return s.eps_trunc if s.eps_trunc is not None else 8 * s.sdf_spacing

    def _bounds(self):
        s = self.spec
        sf = s.surface
        lo = np.empty(self.size)
        hi = np.empty(self.size)
        # the centroid stays over the surface; the whole footprint is an inequality
        lo[0], hi[0] = sf.xmin, sf.xmax
        lo[1], hi[1] = sf.ymin, sf.ymax
        if self.spatial:
            lo[2], hi[2] = sf.z, sf.z + 1.0
            lo[3:6], hi[3:6] = -math.pi, math.pi
        else:
            lo[2], hi[2] = -4 * math.pi, 4 * math.pi
        g = self.sl_grasp.start
        lo[g:g + 3], hi[g:g + 3] = -0.35, 0.35
        lo[g + 3:g + 6], hi[g + 3:g + 6] = -math.pi, math.pi
        lo[g + 6], hi[g + 6] = s.gripper.preshape_lower, s.gripper.preshape_upper
        lo[self.sl_qg], hi[self.sl_qg] = s.arm.lower, s.arm.upper
        lo[self.sl_qp], hi[self.sl_qp] = s.arm.lower, s.arm.upper
        return lo, hi

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def encode(self, cfg: Configuration):
        """Vector plus base rotations ``(R_place0, R_grasp0)`` for a configuration."""
        x = np.zeros(self.size)
        if self.spatial:
            x[:3] = cfg.place.translation
            Rp0 = cfg.place.R
        else:
            R = cfg.place.R
            x[0], x[1] = cfg.place.translation[:2]
            x[2] = math.atan2(R[1, 0], R[0, 0])
            Rp0 = np.eye(3)
        g = self.sl_grasp.start
        x[g:g + 3] = cfg.grasp.palm.translation - self.centroid
        x[g + 6] = cfg.grasp.preshape
        x[self.sl_qg] = cfg.q_grasp
        x[self.sl_qp] = cfg.q_place
        return x, (Rp0, cfg.grasp.palm.R)

    def decode(self, x, bases) -> Configuration:
        Rp0, Rg0 = bases
        if self.spatial:
            place = Pose3.from_rt(Rp0 @ so3_exp(x[3:6]), x[:3])
        else:
            place = Pose3.from_rt(rot_z(x[2]), (x[0], x[1], self.place_z))
        g = self.sl_grasp.start
        palm = Pose3.from_rt(Rg0 @ so3_exp(x[g + 3:g + 6]), self.centroid + x[g:g + 3])
        grasp = GraspConfig(palm, float(x[g + 6]))
        return Configuration(place, grasp, np.array(x[self.sl_qg]), np.array(x[self.sl_qp]))

    def rebase(self, x, bases):
        """Fold rotation increments into the bases; returns the new vector and bases."""
        Rp0, Rg0 = bases
        x = np.array(x)
        if self.spatial:
            Rp0 = Rp0 @ so3_exp(x[3:6])
            x[3:6] = 0.0
        g = self.sl_grasp.start
        Rg0 = Rg0 @ so3_exp(x[g + 3:g + 6])
        x[g + 3:g + 6] = 0.0
        return x, (Rp0, Rg0)

    def place_pose_of(self, cfg: Configuration) -> PlacePose:
        if self.spatial:
            return PlacePose(cfg.place)
        R = cfg.place.R
        t = cfg.place.translation
        return PlacePose(Pose2(t[0], t[1], math.atan2(R[1, 0], R[0, 0])))

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def evaluate(self, x, bases, use_grasp=True, use_place=True, want_grad=True):
        """Objective and scaled constraints with Jacobians over the full vector.

        Returns ``(f, g, c, Jc, h, Jh, raw)`` where ``raw`` holds the unscaled
        pieces (objective terms, fk residuals, collision residuals at the
        declared margin).
        """
        spec = self.spec
        n = self.size
        Rp0, Rg0 = bases
        gs = self.sl_grasp.start
        prel = x[gs:gs + 3]
        dg = x[gs + 3:gs + 6]
        qh = x[gs + 6]
        Rg = Rg0 @ so3_exp(dg)
        Jr_g = right_jacobian(dg)
        if self.spatial:
            tp = x[:3]
            Rp = Rp0 @ so3_exp(x[3:6])
            Jr_p = right_jacobian(x[3:6])
        else:
            tp = np.array([x[0], x[1], self.place_z])
            Rp = rot_z(x[2])
            Jr_p = None

        f = 0.0
        gf = np.zeros(n)
        raw = {}

        # d(world point)/d(place vars) for a point with object-frame offset v
        def dpoint_dplace(v):
            J = np.zeros((3, self.n_place))
            if self.spatial:
                J[:, :3] = np.eye(3)
                J[:, 3:6] = -Rp @ hat(v) @ Jr_p
            else:
                J[0, 0] = J[1, 1] = 1.0
                w = Rp @ v
                J[0, 2], J[1, 2] = -w[1], w[0]
            return J

        if use_grasp:
            lnF, gF = spec.grasp_model.log_success(self.centroid + prel, Rg, qh, self.summary)
            f -= lnF
            gf[gs:gs + 3] -= gF[:3]
            gf[gs + 3:gs + 6] -= Jr_g.T @ gF[3:6]
            gf[gs + 6] -= gF[6]
            raw["lnF"] = lnF
        if use_place:
            pp = PlacePose(Pose3.from_rt(Rp, tp)) if self.spatial else \
                PlacePose(Pose2(x[0], x[1], x[2]))
            H, gH = placement_cost(pp, self.ctx, spec.task, for_solver=True)
            a = spec.task.alpha
            f += a * H
            if self.spatial:
                gf[:3] += a * gH[:3]
                gf[3:6] += a * (Jr_p.T @ gH[3:6])
            else:
                gf[:3] += a * gH
            raw["H"] = H

        c = np.zeros(12)
        Jc = np.zeros((12, n))
        h = np.full(4, -1.0)
        Jh = np.zeros((4, n))
        arm = spec.arm

        if use_grasp:
            r, Jq, Jt = fk_residual_rt(arm, x[self.sl_qg], Rg, self.centroid + prel)
            c[:6] = r
            Jc[:6, self.sl_qg] = Jq
            Jc[:6, gs:gs + 3] = Jt[:, :3]
            Jc[:6, gs + 3:gs + 6] = Jt[:, 3:] @ Jr_g
            raw["fk_grasp"] = r
        if use_place:
            Rt = Rp @ Rg
            pt = tp + Rp @ prel
            r, Jq, Jt = fk_residual_rt(arm, x[self.sl_qp], Rt, pt)
            c[6:] = r
            Jc[6:, self.sl_qp] = Jq
            dpt = dpoint_dplace(prel)
            drho = np.zeros((3, self.n_place))
            if self.spatial:
                drho[:, 3:6] = Rg.T @ Jr_p
            else:
                drho[:, 2] = Rg.T @ _EZ
            Jc[6:, :self.n_place] = Jt[:, :3] @ dpt + Jt[:, 3:] @ drho
            Jc[6:, gs:gs + 3] = Jt[:, :3] @ Rp
            Jc[6:, gs + 3:gs + 6] = Jt[:, 3:] @ Jr_g
            raw["fk_place"] = r

        gripper = spec.gripper
        eps = spec.margin
        if use_place:
            # object points against the place scene (and the table plane when spatial)
            V = self.object_query
            W = V @ Rp.T + tp
            i, di, gi = self._closest(self.place_sdf, W, spec.surface.z if self.spatial else None)
            raw["collision_place_object"] = eps - di
            h[0] = self.eps_solver - di
            Jh[0, :self.n_place] = -gi @ dpoint_dplace(V[i])

            S = prel + gripper.centers @ Rg.T
            W = S @ Rp.T + tp
            k, dk, gk = self._closest(self.place_sdf, W, spec.surface.z, gripper.radii)
            raw["collision_place_robot"] = eps - dk
            h[1] = self.eps_solver - dk
            Jh[1, :self.n_place] = -gk @ dpoint_dplace(S[k])
            Jh[1, gs:gs + 3] = -gk @ Rp
            Jh[1, gs + 3:gs + 6] = gk @ (Rp @ Rg @ hat(gripper.centers[k]) @ Jr_g)

            # object footprint inside the placement rectangle
            i, side, out = self._outside(self.hull_points @ Rp.T + tp)
            raw["footprint_outside"] = out
            h[3] = out + spec.settings.collision_tol
            Jh[3, :self.n_place] = side @ dpoint_dplace(self.hull_points[i])
        if use_grasp:
            W = self.centroid + prel + gripper.centers @ Rg.T
            k, dk, gk = self._closest(self.grasp_sdf, W, spec.grasp_table_z, gripper.radii)
            raw["collision_grasp_robot"] = eps - dk
            h[2] = self.eps_solver - dk
            Jh[2, gs:gs + 3] = -gk
            Jh[2, gs + 3:gs + 6] = gk @ (Rg @ hat(gripper.centers[k]) @ Jr_g)

        c_s = c / self.eq_scale
        Jc_s = Jc / self.eq_scale[:, None]
        h_s = h / self.in_scale
        Jh_s = Jh / self.in_scale[:, None]
        return f, gf, c_s, Jc_s, h_s, Jh_s, raw

    def _outside(self, W):
        """Largest signed excursion of ``W`` beyond the surface rectangle: index, direction, value."""
        sf = self.spec.surface
        E = np.column_stack([W[:, 0] - sf.xmax, sf.xmin - W[:, 0], W[:, 1] - sf.ymax, sf.ymin - W[:, 1]])
        i, k = np.unravel_index(int(np.argmax(E)), E.shape)
        side = np.zeros(3)
        side[k // 2] = 1.0 if k % 2 == 0 else -1.0
        return int(i), side, float(E[i, k])

    def _closest(self, sdf, W, table_z, offset=0.0):
        """Index, distance (minus ``offset``) and gradient of the closest point of ``W``."""
        if sdf is None:
            d = np.full(len(W), self.eps_trunc)
        else:
            d = query_points(sdf, W, gradient=False)[0]
        if table_z is not None:
            d = np.minimum(d, W[:, 2] - table_z)
        d = d - offset
        k = int(np.argmin(d))
        _, g = self._distances(sdf, W[k:k + 1], table_z)
        return k, float(d[k]), g[0]

    def _distances(self, sdf, W, table_z):
        """Distance to the scene (SDF) and optionally to the table plane, whichever is smaller."""
        if sdf is None:
            d = np.full(len(W), self.eps_trunc)
            g = np.zeros((len(W), 3))
        else:
            d, g = query_points(sdf, W, exact_gradient=True)
        if table_z is not None:
            dz = W[:, 2] - table_z
            below = dz < d
            d = np.where(below, dz, d)
            g = np.where(below[:, None], _EZ, g)
        return d, g

    # ------------------------------------------------------------------
    # reporting
    # ------------------------------------------------------------------

    def objective_terms(self, cfg: Configuration, use_grasp=True, use_place=True):
        """``(objective, F, H)`` recomputed from poses; ``H`` is the solver's cost."""
        spec = self.spec
        lnF = spec.grasp_model.log_success(cfg.grasp.palm.translation, cfg.grasp.palm.R,
                                           cfg.grasp.preshape, self.summary)[0]
        H, _ = placement_cost(self.place_pose_of(cfg), self.ctx, spec.task, for_solver=True)
        f = 0.0
        if use_grasp:
            f -= lnF
        if use_place:
            f += spec.task.alpha * H
        return f, math.exp(lnF), H


def check_constraints(sol: Solution | Configuration, spec: ProblemSpec,
                      problem: Problem | None = None) -> dict:
    """Recompute every constraint residual from the stored poses and joints.

    Residuals are "violation-positive": a constraint holds when its residual
    is ``<= 0`` (bounds, collisions) or its magnitude is within tolerance
    (kinematics).  Collision residuals are ``margin - distance``.
    """
    pb = problem or Problem(spec)
    if isinstance(sol, Solution):
        if len(sol.q_grasp) == 0:
            return {"feasible": False}
        cfg = Configuration(sol.place_pose, sol.grasp, sol.q_grasp, sol.q_place)
    else:
        cfg = sol
    arm, gripper = spec.arm, spec.gripper
    eps = spec.margin
    out = {}
    t = cfg.place.translation
    sf = spec.surface
    lo, hi = pb.lower, pb.upper
    box = max(lo[0] - t[0], t[0] - hi[0], lo[1] - t[1], t[1] - hi[1])
    if not pb.spatial:
        box = max(box, abs(t[2] - pb.place_z))
    else:
        box = max(box, sf.z - t[2])
    out["place_box"] = float(box)
    out["footprint_outside"] = pb._outside(cfg.place.apply(pb.hull_points))[2]
    out["preshape_bounds"] = float(max(gripper.preshape_lower - cfg.grasp.preshape,
                                       cfg.grasp.preshape - gripper.preshape_upper))
    out["joint_limits_grasp"] = float(np.max(np.maximum(arm.lower - cfg.q_grasp, cfg.q_grasp - arm.upper)))
    out["joint_limits_place"] = float(np.max(np.maximum(arm.lower - cfg.q_place, cfg.q_place - arm.upper)))

    palm_g = cfg.grasp.palm
    r_g = fk_residual_rt(arm, cfg.q_grasp, palm_g.R, palm_g.translation)[0]
    g_rel = Pose3.from_rt(palm_g.R, palm_g.translation - pb.centroid)
    palm_p = cfg.place.compose(g_rel)
    r_p = fk_residual_rt(arm, cfg.q_place, palm_p.R, palm_p.translation)[0]
    out["fk_grasp"] = float(np.abs(r_g).max())
    out["fk_place"] = float(np.abs(r_p).max())

    obj_world = cfg.place.apply(pb.object_query)
    d_obj, _ = pb._distances(pb.place_sdf, obj_world, sf.z if pb.spatial else None)
    spheres_place = palm_p.apply(gripper.centers)
    d_rp, _ = pb._distances(pb.place_sdf, spheres_place, sf.z)
    d_rp = d_rp - gripper.radii
    spheres_grasp = palm_g.apply(gripper.centers)
    d_rg, _ = pb._distances(pb.grasp_sdf, spheres_grasp, spec.grasp_table_z)
    d_rg = d_rg - gripper.radii
    out["collision_place_object"] = eps - float(d_obj.min())
    out["collision_place_robot"] = eps - float(d_rp.min())
    out["collision_place_union"] = eps - float(min(d_obj.min(), d_rp.min()))
    out["collision_grasp_robot"] = eps - float(d_rg.min())
    st = spec.settings
    out["feasible"] = bool(
        out["place_box"] <= 1e-9 and out["footprint_outside"] <= 0.0 and out["preshape_bounds"] <= 1e-9
        and out["joint_limits_grasp"] <= 1e-9 and out["joint_limits_place"] <= 1e-9
        and out["fk_grasp"] <= st.fk_tol and out["fk_place"] <= st.fk_tol
        and out["collision_place_union"] <= 0.0 and out["collision_grasp_robot"] <= 0.0
    )
    return out


def grasp_side_feasible(res: dict, spec: ProblemSpec) -> bool:
    return (res["fk_grasp"] <= spec.settings.fk_tol and res["collision_grasp_robot"] <= 0.0
            and res["joint_limits_grasp"] <= 1e-9 and res["preshape_bounds"] <= 1e-9)
