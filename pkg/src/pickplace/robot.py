"""Serial revolute arm kinematics, joint limits and gripper sphere geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError, ParameterError
from .geom import (
    PointCloud,
    Pose3,
    centroid,
    downsample,
    right_jacobian_inv,
    so3_log,
)
from .sdf import CollisionQuerySet

ARM_SCHEMA = "pickplace.arm/1"
_EYE3 = np.eye(3)


@dataclass(frozen=True, eq=False)
class Joint:
    axis: np.ndarray
    origin: Pose3
    lower: float
    upper: float
    name: str = ""

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise ParameterError("joint axis must be non-zero")
        object.__setattr__(self, "axis", a / n)
        if not self.lower < self.upper:
            raise ParameterError(f"joint {self.name!r}: lower limit must be below upper")


@dataclass(frozen=True, eq=False)
class ArmModel:
    joints: tuple[Joint, ...]
    base: Pose3 = field(default_factory=Pose3)
    tool: Pose3 = field(default_factory=Pose3)

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @cached_property
    def _fixed(self):
        """Cached per-joint (origin matrix, hat(axis), hat(axis)^2) and tool matrix."""
        from .geom import hat

        rows = []
        for j in self.joints:
            K = hat(j.axis)
            rows.append((j.origin.matrix(), K, K @ K, j.axis))
        return self.base.matrix(), tuple(rows), self.tool.matrix()

    def shoulder(self) -> np.ndarray:
        """World position of the second joint, used for quick reach tests."""
        T = self.base.matrix()
        for j in self.joints[:2]:
            T = T @ j.origin.matrix()
        return T[:3, 3]

    def reach(self) -> float:
        """Upper bound on the palm distance from the shoulder."""
        total = sum(np.linalg.norm(j.origin.translation) for j in self.joints[2:])
        return float(total + np.linalg.norm(self.tool.translation))


@dataclass(frozen=True, eq=False)
class GripperGeometry:
    """Spheres in the palm frame plus the preshape-to-opening map.

    Palm frame: x is the approach direction, y the finger closing direction.
    """

    centers: np.ndarray
    radii: np.ndarray
    opening_offset: float = 0.02
    opening_gain: float = 0.1
    preshape_lower: float = 0.0
    preshape_upper: float = 1.2

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(c) != len(r):
            raise ParameterError("one radius per sphere center is required")
        if np.any(r <= 0):
            raise ParameterError("sphere radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def opening(self, preshape: float) -> float:
        return self.opening_offset + self.opening_gain * preshape

    def preshape_for_width(self, width: float) -> float:
        q = (width - self.opening_offset) / self.opening_gain
        return float(min(max(q, self.preshape_lower), self.preshape_upper))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _check_q(arm: ArmModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if len(q) != arm.n:
        raise ParameterError(f"expected {arm.n} joint values, got {len(q)}")
    return q


def _chain(arm: ArmModel, q: np.ndarray):
    base, rows, tool = arm._fixed
    T = base
    axes = np.empty((arm.n, 3))
    pts = np.empty((arm.n, 3))
    J = np.eye(4)
    for i, (origin, K, K2, axis) in enumerate(rows):
        T = T @ origin
        axes[i] = T[:3, :3] @ axis
        pts[i] = T[:3, 3]
        J[:3, :3] = _EYE3 + math.sin(q[i]) * K + (1.0 - math.cos(q[i])) * K2
        T = T @ J
    return T @ tool, axes, pts


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product, transposed to 3 x n (np.cross is slow for tiny arrays)."""
    out = np.empty((3, len(a)))
    out[0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def fk(arm: ArmModel, q) -> Pose3:
    """Palm pose in the world for joint vector ``q``."""
    T, _, _ = _chain(arm, _check_q(arm, q))
    return Pose3.from_matrix(T)


def fk_matrix(arm: ArmModel, q) -> np.ndarray:
    T, _, _ = _chain(arm, _check_q(arm, q))
    return T


def geometric_jacobian(arm: ArmModel, q) -> np.ndarray:
    """6 x n world-frame Jacobian, rows (linear velocity, angular velocity)."""
    T, axes, pts = _chain(arm, _check_q(arm, q))
    p = T[:3, 3]
    J = np.empty((6, arm.n))
    J[:3] = _cross_rows(axes, p - pts)
    J[3:] = axes.T
    return J


def fk_residual(arm: ArmModel, q, target: Pose3, target_jacobian: bool = False):
    """Residual between ``fk(q)`` and ``target`` and its Jacobians.

    The residual is ``(p_ee - p_target, log(R_target^T R_ee))``.  Returns
    ``(r, J_q)`` and, with ``target_jacobian=True``, also the 6x6 Jacobian
    with respect to the target's (translation, right rotation increment).
    """
    out = fk_residual_rt(arm, _check_q(arm, q), target.R, target.translation)
    return out if target_jacobian else out[:2]


def fk_residual_rt(arm: ArmModel, q: np.ndarray, R_t: np.ndarray, p_t: np.ndarray):
    """``fk_residual`` for a target given as rotation matrix and position; always returns J_t."""
    T, axes, pts = _chain(arm, q)
    R_ee, p_ee = T[:3, :3], T[:3, 3]
    E = R_t.T @ R_ee
    e = so3_log(E)
    r = np.concatenate([p_ee - p_t, e])
    Jinv = right_jacobian_inv(e)
    Jq = np.empty((6, arm.n))
    Jq[:3] = _cross_rows(axes, p_ee - pts)
    Jq[3:] = Jinv @ (R_ee.T @ axes.T)
    Jt = np.zeros((6, 6))
    Jt[:3, :3] = -_EYE3
    Jt[3:, 3:] = -Jinv @ E.T
    return r, Jq, Jt


def clamp_joints(arm: ArmModel, q) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=float), arm.lower, arm.upper)


def solve_ik(arm: ArmModel, target: Pose3, seeds, iters: int = 100, tol: float = 1e-3,
             damping: float = 0.02, max_step: float = 0.4, stall: int = 15):
    """Damped least-squares IK from several seed postures.

    A seed is abandoned once its residual has not dropped by 1% in
    ``stall`` consecutive iterations.  Returns ``(q, residual_norm)`` for
    the best seed; success means ``residual_norm <= tol``.
    """
    best_q, best_err = None, math.inf
    damp = damping * damping * np.eye(6)
    R_t, p_t = target.R, target.translation
    for seed in seeds:
        q = clamp_joints(arm, seed)
        err = math.inf
        mark, since = math.inf, 0
        for _ in range(iters):
            r, J, _ = fk_residual_rt(arm, q, R_t, p_t)
            err = math.sqrt(float(r @ r))
            if err <= tol:
                break
            # give up on a seed that has stalled (typically pinned at a joint limit)
            if err < 0.99 * mark:
                mark, since = err, 0
            else:
                since += 1
                if since >= stall:
                    break
            dq = -J.T @ np.linalg.solve(J @ J.T + damp, r)
            step = math.sqrt(float(dq @ dq))
            if step > max_step:
                dq *= max_step / step
            q = np.clip(q + dq, arm.lower, arm.upper)
        else:
            r = fk_residual_rt(arm, q, R_t, p_t)[0]
            err = math.sqrt(float(r @ r))
        if err < best_err:
            best_q, best_err = q, err
        if best_err <= tol:
            break
    return best_q, best_err


def ik_seeds(arm: ArmModel, target_position) -> list[np.ndarray]:
    """Three seed postures pointing the arm at the target's azimuth."""
    p = np.asarray(target_position, dtype=float) - arm.base.translation
    yaw = math.atan2(p[1], p[0])
    if arm.n != 7:
        return [np.zeros(arm.n), np.full(arm.n, 0.3), np.full(arm.n, -0.3)]
    return [
        np.array([yaw, 0.7, 0.0, -1.3, 0.0, 1.0, 0.0]),
        np.array([yaw, 0.3, 0.0, -1.6, 0.0, -0.5, 0.0]),
        np.array([yaw, 1.0, 0.0, -0.6, 0.0, 1.2, 1.57]),
    ]


# ---------------------------------------------------------------------------
# object cloud augmentation
# ---------------------------------------------------------------------------

def augment_object_cloud(Z_O: PointCloud, palm: Pose3, g: GripperGeometry,
                         spacing: float = 0.01, object_origin=None) -> CollisionQuerySet:
    """Object points plus gripper sphere centers in the object-placement frame.

    The object-placement frame has its origin at the object centroid (or
    ``object_origin``) and world-aligned axes; ``palm`` is the grasp palm
    pose in the same world frame as ``Z_O``.
    """
    if Z_O.is_empty:
        raise EmptyInputError("object cloud is empty")
    c = centroid(Z_O) if object_origin is None else np.asarray(object_origin, dtype=float)
    obj = downsample(Z_O.points - c, spacing)
    rob = (palm.translation - c) + g.centers @ palm.R.T
    return CollisionQuerySet(PointCloud(obj, "object"), PointCloud(rob, "object"), g.radii.copy())


# ---------------------------------------------------------------------------
# bundled models and file format
# ---------------------------------------------------------------------------

def planar_two_link() -> ArmModel:
    """Two unit links rotating about z; used as a hand-checkable test arm."""
    joints = (
        Joint((0, 0, 1), Pose3(), -math.pi * 4, math.pi * 4, "j1"),
        Joint((0, 0, 1), Pose3((1.0, 0.0, 0.0)), -math.pi * 4, math.pi * 4, "j2"),
    )
    return ArmModel(joints, Pose3(), Pose3((1.0, 0.0, 0.0)))


def _pose_from_json(d) -> Pose3:
    if d is None:
        return Pose3()
    return Pose3(d.get("translation", (0.0, 0.0, 0.0)), d.get("rotation", (1.0, 0.0, 0.0, 0.0)))


def _pose_to_json(p: Pose3) -> dict:
    return {"translation": [float(v) for v in p.translation],
            "rotation": [float(v) for v in p.rotation]}


def arm_from_dict(d: dict) -> tuple[ArmModel, GripperGeometry]:
    if d.get("schema") != ARM_SCHEMA:
        raise FormatError(f"expected schema {ARM_SCHEMA!r}, got {d.get('schema')!r}")
    try:
        joints = tuple(
            Joint(j["axis"], _pose_from_json(j.get("origin")), float(j["lower"]),
                  float(j["upper"]), j.get("name", f"j{i + 1}"))
            for i, j in enumerate(d["joints"])
        )
        arm = ArmModel(joints, _pose_from_json(d.get("base")), _pose_from_json(d.get("tool")))
        gd = d["gripper"]
        spheres = gd["spheres"]
        opening = gd.get("opening", {})
        gripper = GripperGeometry(
            [s["center"] for s in spheres],
            [s["radius"] for s in spheres],
            opening.get("offset", 0.02),
            opening.get("gain", 0.1),
            opening.get("preshape_lower", 0.0),
            opening.get("preshape_upper", 1.2),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed arm description: {exc}") from exc
    return arm, gripper


def arm_to_dict(arm: ArmModel, gripper: GripperGeometry) -> dict:
    return {
        "schema": ARM_SCHEMA,
        "base": _pose_to_json(arm.base),
        "tool": _pose_to_json(arm.tool),
        "joints": [
            {"name": j.name, "axis": [float(v) for v in j.axis], "origin": _pose_to_json(j.origin),
             "lower": j.lower, "upper": j.upper}
            for j in arm.joints
        ],
        "gripper": {
            "spheres": [{"center": [float(v) for v in c], "radius": float(r)}
                        for c, r in zip(gripper.centers, gripper.radii)],
            "opening": {"offset": gripper.opening_offset, "gain": gripper.opening_gain,
                        "preshape_lower": gripper.preshape_lower,
                        "preshape_upper": gripper.preshape_upper},
        },
    }


def load_arm(path=None) -> tuple[ArmModel, GripperGeometry]:
    """Load an arm description; ``None`` loads the bundled 7-joint arm."""
    if path is None:
        text = resources.files("pickplace").joinpath("data/arm7.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"arm description is not valid JSON: {exc}") from exc
    return arm_from_dict(d)


def default_arm() -> tuple[ArmModel, GripperGeometry]:
    return load_arm(None)
