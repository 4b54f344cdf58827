"""Placement costs, their analytic gradients, and the cost-to-likelihood map.

Gradients are taken over the pose parameterization used by the solver:

* planar poses: ``(x, y, theta)``
* spatial poses: ``(translation 3, rotation increment 3)`` with the
  increment applied on the right, ``R' = R exp(delta)``.

Object clouds passed to the costs are expressed in the object frame: origin
at the object's centroid, axes parallel to the world axes at grasp time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DegenerateGeometryError, EmptyInputError, ParameterError
from .geom import PointCloud, Pose2, Pose3, abs_rotation, hat, rot_z, so3_log, wrap_angle

COST_KINDS = ("target", "pack", "stack", "inline")


@dataclass(frozen=True, eq=False)
class PlacePose:
    """A placement pose, planar or spatial."""

    pose: Pose2 | Pose3

    @property
    def kind(self) -> str:
        return "planar" if isinstance(self.pose, Pose2) else "spatial"

    @classmethod
    def planar(cls, x: float, y: float, theta: float) -> "PlacePose":
        return cls(Pose2(x, y, theta))

    @classmethod
    def spatial(cls, pose: Pose3) -> "PlacePose":
        return cls(pose)

    def to_pose3(self, z: float = 0.0) -> Pose3:
        if isinstance(self.pose, Pose3):
            return self.pose
        p = self.pose
        return Pose3.from_rt(rot_z(p.theta), (p.x, p.y, z))


@dataclass(frozen=True, eq=False)
class TaskParams:
    """Task block of a placement problem.

    ``target`` is a ``Pose2``/``Pose3`` for target tasks and a 2-vector
    point on the line for inline tasks.
    """

    kind: str = "target"
    alpha: float = 1.0
    target: object = None
    line_angle: float = 0.0
    stack_base: np.ndarray | None = None
    tether: float = 10.0
    beta: float = 100.0
    ref: tuple[float, float] = (0.0, 0.0)
    area_weight: float = 1.0
    length_weight: float = 1.0
    abs_mode: str = "elementwise"

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ParameterError(f"unknown cost kind {self.kind!r}")
        if not self.alpha > 0:
            raise ParameterError("alpha must be positive")
        if self.beta <= 0 or self.tether < 0:
            raise ParameterError("beta must be positive and tether non-negative")

    @property
    def spatial(self) -> bool:
        return self.kind == "stack"


def likelihood_from_cost(H: float, alpha: float) -> float:
    """Unnormalized likelihood ``exp(-alpha * H)``.

    The solver only ever uses ``-ln G = alpha * H``, so the normalizer never
    matters.
    """
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    return math.exp(-alpha * H)


# ---------------------------------------------------------------------------
# target
# ---------------------------------------------------------------------------

def pose_difference(x_t: Pose2 | Pose3, x_p: Pose2 | Pose3) -> np.ndarray:
    """``x_t - x_p``: wrapped angle for planar poses, rotation log for spatial ones."""
    if isinstance(x_t, Pose2) and isinstance(x_p, Pose2):
        return np.array([x_t.x - x_p.x, x_t.y - x_p.y, wrap_angle(x_t.theta - x_p.theta)])
    if isinstance(x_t, Pose3) and isinstance(x_p, Pose3):
        return np.concatenate([x_t.translation - x_p.translation, so3_log(x_p.R.T @ x_t.R)])
    raise ParameterError("target and placement poses live in different spaces")


def cost_target(x_p: PlacePose, x_t) -> tuple[float, np.ndarray]:
    """Half squared pose distance to the target.

    For spatial poses the rotation part is the geodesic error
    ``e = log(R_p^T R_t)``; its gradient w.r.t. a right increment of
    ``R_p`` is ``-e`` because ``e`` is a fixed point of the inverse
    Jacobian.
    """
    d = pose_difference(x_t, x_p.pose)
    return 0.5 * float(d @ d), -d


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def _extents(P: np.ndarray) -> tuple[float, float]:
    span = P.max(axis=0) - P.min(axis=0)
    return float(span[0]), float(span[1])


def _soft_span(v: np.ndarray, beta: float):
    """Smooth ``max(v) - min(v)`` and its gradient w.r.t. ``v``."""
    hi = logsumexp(beta * v) / beta
    lo = -logsumexp(-beta * v) / beta
    return hi - lo, softmax(beta * v) - softmax(-beta * v)


def cost_pack(x_p: PlacePose, Z_O: PointCloud, Z_E: PointCloud, ref=(0.0, 0.0),
              beta: float = 100.0, smooth: bool = False, area_weight: float = 1.0,
              length_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Footprint area of scene plus object, plus the posed object box offset from ``ref``.

    ``value = L_E W_E + (1, 1, 0) T_2(x_p) (L_O, W_O, 1)^T`` with the
    translation measured from ``ref``.  The returned value uses hard
    extents unless ``smooth`` is set; the gradient always comes from the
    log-sum-exp extents with temperature ``beta``.
    """
    if x_p.kind != "planar":
        raise ParameterError("packing cost needs a planar pose")
    if Z_O.is_empty or Z_E.is_empty:
        raise EmptyInputError("packing cost needs non-empty object and scene clouds")
    p = x_p.pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    R = np.array([[c, -s], [s, c]])
    dR = np.array([[-s, -c], [c, -s]])
    O = Z_O.points[:, :2]
    posed = O @ R.T + np.array([p.x, p.y])
    E = Z_E.points[:, :2]
    L_O, W_O = _extents(O)

    # second term: (1,1,0) T_2 (L_O, W_O, 1)
    t2 = (c + s) * L_O + (c - s) * W_O + (p.x - ref[0]) + (p.y - ref[1])
    dt2 = np.array([1.0, 1.0, (c - s) * L_O + (-s - c) * W_O])

    both = np.vstack([E, posed])
    nE = len(E)
    Lx, gx = _soft_span(both[:, 0], beta)
    Ly, gy = _soft_span(both[:, 1], beta)
    gxo, gyo = gx[nE:], gy[nE:]
    dpts_dth = O @ dR.T
    dLx = np.array([gxo.sum(), 0.0, float(gxo @ dpts_dth[:, 0])])
    dLy = np.array([0.0, gyo.sum(), float(gyo @ dpts_dth[:, 1])])
    grad = area_weight * (dLx * Ly + Lx * dLy) + length_weight * dt2
    if smooth:
        area = Lx * Ly
    else:
        L_E, W_E = _extents(both)
        area = L_E * W_E
    return area_weight * area + length_weight * t2, grad


def pack_area_growth(x_p: PlacePose, Z_O: PointCloud, Z_E: PointCloud) -> float:
    """Growth of the scene's x-y bounding-box area caused by the placement (hard extents)."""
    p = x_p.pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    posed = Z_O.points[:, :2] @ np.array([[c, -s], [s, c]]).T + np.array([p.x, p.y])
    E = Z_E.points[:, :2]
    L0, W0 = _extents(E)
    L1, W1 = _extents(np.vstack([E, posed]))
    return max(0.0, L1 * W1 - L0 * W0)


# ---------------------------------------------------------------------------
# stacking
# ---------------------------------------------------------------------------

def object_extents(Z_O: PointCloud) -> np.ndarray:
    """Full axis-aligned extents ``(L_O, W_O, H_O)`` of an object-frame cloud."""
    if Z_O.is_empty:
        raise EmptyInputError("object cloud is empty")
    P = Z_O.points
    ext = P.max(axis=0) - P.min(axis=0)
    if np.any(ext <= 1e-12):
        raise DegenerateGeometryError("object has a zero extent")
    return ext


def _smooth_abs(x, eta):
    r = np.sqrt(x * x + eta * eta)
    return r - eta, x / r


def cost_stack(x_p: PlacePose, Z_O: PointCloud | np.ndarray, x_c, tether: float = 10.0,
               smooth: float = 0.0, mode: str = "elementwise") -> tuple[float, np.ndarray]:
    """Projected length plus height of the rotated object, plus a position tether.

    ``value = (1,0,1) |R| (L_O, W_O, H_O)^T + tether * |t - x_c|^2``.
    ``|R|`` is elementwise; ``smooth > 0`` replaces ``|.|`` by
    ``sqrt(x^2 + smooth^2) - smooth`` so the solver sees a differentiable
    function.  The gradient of the hard version uses ``sign(0) = 0``.
    """
    if x_p.kind != "spatial":
        raise ParameterError("stacking cost needs a spatial pose")
    ext = Z_O if isinstance(Z_O, np.ndarray) else object_extents(Z_O)
    ext = np.asarray(ext, dtype=float)
    if ext.shape != (3,) or np.any(ext <= 1e-12):
        raise DegenerateGeometryError("object extents must be three positive lengths")
    pose = x_p.pose
    R = pose.R
    rows = R[[0, 2], :]
    if mode == "factored":
        if smooth:
            raise ParameterError("smoothing is only available for the elementwise mode")
        A = abs_rotation(R, "factored")
        val = float(A[[0, 2], :].sum(axis=0) @ ext)
        grad_rot = _fd_rotation_grad(lambda Rm: float(abs_rotation(Rm, "factored")[[0, 2], :].sum(axis=0) @ ext), R)
    else:
        if smooth > 0:
            a, da = _smooth_abs(rows, smooth)
        else:
            a, da = np.abs(rows), np.sign(rows)
        val = float(a.sum(axis=0) @ ext)
        # d|R_ij|/d delta_k = sign(R_ij) (R hat(e_k))_ij
        grad_rot = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            dR = (R @ hat(e))[[0, 2], :]
            grad_rot[k] = float(((da * dR) @ ext).sum())
    d = pose.translation - np.asarray(x_c, dtype=float)
    val += tether * float(d @ d)
    return val, np.concatenate([2.0 * tether * d, grad_rot])


def _fd_rotation_grad(f, R, h=1e-7):
    from .geom import so3_exp

    g = np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[k] = (f(R @ so3_exp(e)) - f(R @ so3_exp(-e))) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# inline
# ---------------------------------------------------------------------------

def cost_inline(x_p: PlacePose, x_t, theta_l: float) -> tuple[float, np.ndarray]:
    """Quadratic form ``d^T K d`` with ``K = Rz(theta_l)^T diag(1, 0) Rz(theta_l)``.

    Only the first row of ``Rz(theta_l) d`` is penalized, so points on the
    line through ``x_t`` with direction ``(sin theta_l, cos theta_l)`` cost
    nothing.  The yaw of ``x_p`` is free.
    """
    if x_p.kind != "planar":
        raise ParameterError("inline cost needs a planar pose")
    p = x_p.pose
    d = np.array([p.x, p.y]) - np.asarray(x_t, dtype=float)[:2]
    c, s = math.cos(theta_l), math.sin(theta_l)
    n = np.array([c, -s])
    r = float(n @ d)
    return r * r, np.array([2.0 * r * n[0], 2.0 * r * n[1], 0.0])


def line_direction(theta_l: float) -> np.ndarray:
    return np.array([math.sin(theta_l), math.cos(theta_l)])


def line_deviation(xy, x_t, theta_l: float) -> float:
    """Perpendicular distance from ``xy`` to the zero-cost line of ``cost_inline``."""
    d = np.asarray(xy, dtype=float)[:2] - np.asarray(x_t, dtype=float)[:2]
    return abs(math.cos(theta_l) * d[0] - math.sin(theta_l) * d[1])


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlacementContext:
    """Everything a cost needs besides the pose: object-frame cloud and scene cloud."""

    object_cloud: PointCloud
    scene_cloud: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3))))
    extents: np.ndarray | None = None


def placement_cost(x_p: PlacePose, ctx: PlacementContext, task: TaskParams,
                   for_solver: bool = False) -> tuple[float, np.ndarray]:
    """Cost ``H`` and gradient for the task.

    With ``for_solver`` the packing and stacking costs switch to their
    smooth versions so that value and gradient agree.
    """
    if task.kind == "target":
        return cost_target(x_p, task.target)
    if task.kind == "inline":
        return cost_inline(x_p, task.target, task.line_angle)
    if task.kind == "pack":
        scene = ctx.scene_cloud
        if scene.is_empty:
            # an empty scene has no footprint; the area term reduces to the object's own
            scene = PointCloud(np.zeros((1, 3)) + np.array([task.ref[0], task.ref[1], 0.0]))
        return cost_pack(x_p, ctx.object_cloud, scene, task.ref, task.beta, smooth=for_solver,
                         area_weight=task.area_weight, length_weight=task.length_weight)
    ext = ctx.extents if ctx.extents is not None else object_extents(ctx.object_cloud)
    return cost_stack(x_p, ext, task.stack_base, task.tether,
                      smooth=1e-3 if for_solver else 0.0, mode=task.abs_mode)


def placement_likelihood(x_p: PlacePose, ctx: PlacementContext, task: TaskParams) -> float:
    """Reported likelihood in ``[0, 1]``.

    Packing reports ``exp(-alpha * area growth)`` so that no growth of the
    scene footprint gives exactly 1.  Stacking reports the orientation term
    relative to its best axis-aligned value, without the tether.
    """
    if task.kind == "pack":
        scene = ctx.scene_cloud
        if scene.is_empty:
            return 1.0
        return likelihood_from_cost(pack_area_growth(x_p, ctx.object_cloud, scene), task.alpha)
    if task.kind == "stack":
        ext = ctx.extents if ctx.extents is not None else object_extents(ctx.object_cloud)
        H, _ = cost_stack(x_p, ext, x_p.pose.translation, 0.0, mode=task.abs_mode)
        best = min(ext[i] + ext[j] for i in range(3) for j in range(3) if i != j)
        return likelihood_from_cost(max(0.0, H - best), task.alpha)
    H, _ = placement_cost(x_p, ctx, task)
    return likelihood_from_cost(H, task.alpha)
