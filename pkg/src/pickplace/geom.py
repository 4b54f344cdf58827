"""Poses, rotations, point clouds and voxel occupancy.

Conventions used throughout the package:

* Quaternions are ``(w, x, y, z)`` with unit norm and ``w >= 0``.
* ``Pose3`` maps points from its local frame into the parent frame,
  ``p_parent = R @ p_local + t``.
* Rotation increments are right perturbations, ``R' = R @ exp(delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, ParameterError

_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = math.remainder(float(theta), 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    theta = math.acos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if math.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * w


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(phi + d) ~= exp(phi) exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < 1e-12:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    theta = math.sqrt(theta2)
    a = (1.0 - math.cos(theta)) / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * K + b * K @ K


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < 1e-12:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    theta = math.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _canonical_quat(np.array(q))


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ParameterError("quaternion must be finite and non-zero")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def euler_xyz(R) -> tuple[float, float, float]:
    """Angles ``(a, b, c)`` with ``R = rot_x(a) @ rot_y(b) @ rot_z(c)``."""
    R = np.asarray(R, dtype=float)
    b = math.asin(min(1.0, max(-1.0, R[0, 2])))
    if abs(math.cos(b)) > 1e-9:
        a = math.atan2(-R[1, 2], R[2, 2])
        c = math.atan2(-R[0, 1], R[0, 0])
    else:
        a = math.atan2(R[2, 1], R[1, 1])
        c = 0.0
    return a, b, c


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True, eq=False)
class Pose3:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ParameterError("translation must be finite")
        t.flags.writeable = False
        q = _canonical_quat(np.array(self.rotation, dtype=float).reshape(4))
        q.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose3":
        return cls(np.asarray(t, dtype=float), matrix_to_quat(R))

    @classmethod
    def from_matrix(cls, T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "Pose3":
        return cls.from_rt(so3_exp(rotvec), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        R = self.R
        return Pose3.from_rt(R @ other.R, R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3.from_rt(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return P @ self.R.T + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose3):
            return NotImplemented
        return bool(
            np.array_equal(self.translation, other.translation)
            and np.array_equal(self.rotation, other.rotation)
        )

    def __hash__(self):
        return hash((self.translation.tobytes(), self.rotation.tobytes()))

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.4g}" for v in self.translation)
        q = ", ".join(f"{v:.4g}" for v in self.rotation)
        return f"Pose3(t=({t}), q=({q}))"


def homogeneous_2d(p: Pose2) -> np.ndarray:
    """3x3 homogeneous SE(2) matrix of a planar pose."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def abs_rotation(p: Pose3 | np.ndarray, mode: str = "elementwise") -> np.ndarray:
    """Absolute-valued rotation matrix used by the stacking cost.

    ``mode="elementwise"`` returns ``|R|`` of the full rotation.
    ``mode="factored"`` returns ``|Rx(a)| |Ry(b)| |Rz(c)|`` from the
    ``R = Rx Ry Rz`` Euler decomposition.
    """
    R = p.R if isinstance(p, Pose3) else np.asarray(p, dtype=float)
    if mode == "elementwise":
        return np.abs(R)
    if mode == "factored":
        a, b, c = euler_xyz(R)
        return np.abs(rot_x(a)) @ np.abs(rot_y(b)) @ np.abs(rot_z(c))
    raise ParameterError(f"unknown abs_rotation mode {mode!r}")


# ---------------------------------------------------------------------------
# Point clouds and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        P = np.array(self.points, dtype=float)
        if P.size == 0:
            P = P.reshape(0, 3)
        if P.ndim != 2 or P.shape[1] != 3:
            raise ParameterError(f"points must have shape (N, 3), got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ParameterError("point coordinates must be finite")
        P.flags.writeable = False
        object.__setattr__(self, "points", P)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def union(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.points, other.points]), self.frame)


@dataclass(frozen=True)
class Box2:
    length: float
    width: float
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.length < 0 or self.width < 0:
            raise ParameterError("box extents must be non-negative")

    @property
    def area(self) -> float:
        return self.length * self.width


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Uniform voxel grid; cell ``i`` has its center at ``origin + (i + 0.5) * spacing``."""

    origin: np.ndarray
    spacing: float
    cells: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(3)
        cells = np.array(self.cells, dtype=bool)
        if self.spacing <= 0:
            raise ParameterError("spacing must be positive")
        if cells.ndim != 3 or min(cells.shape) < 2:
            raise ParameterError(f"grid dims must be 3 values >= 2, got {cells.shape}")
        origin.flags.writeable = False
        cells.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "cells", cells)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.cells.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.spacing

    def cell_index(self, points) -> np.ndarray:
        """Integer cell index per point (unclamped; may be out of range)."""
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.floor((P - self.origin) / self.spacing).astype(np.int64)

    def cell_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.spacing

    def occupied_centers(self) -> np.ndarray:
        return self.cell_center(np.argwhere(self.cells))


def transform_points(p: Pose3, c: PointCloud, frame: str | None = None) -> PointCloud:
    return PointCloud(p.apply(c.points), c.frame if frame is None else frame)


def _require_points(c: PointCloud, what: str = "point cloud"):
    if c.is_empty:
        raise EmptyInputError(f"{what} is empty")


def bounding_box_2d(c: PointCloud) -> Box2:
    """Axis-aligned x-y bounding box of the projected points."""
    _require_points(c)
    lo = c.points[:, :2].min(axis=0)
    hi = c.points[:, :2].max(axis=0)
    return Box2(float(hi[0] - lo[0]), float(hi[1] - lo[1]), tuple(0.5 * (lo + hi)))


def centroid(c: PointCloud) -> np.ndarray:
    _require_points(c)
    return c.points.mean(axis=0)


def voxelize(c: PointCloud, spacing: float, padding: int = 1) -> OccupancyGrid:
    """Occupancy grid over the cloud's bounding box inflated by ``padding`` cells.

    The grid is offset by half a cell so that the minimum corner of the
    cloud sits at a cell center; with ``padding >= 1`` every point lands
    strictly inside the grid.
    """
    _require_points(c)
    if not spacing > 0:
        raise ParameterError("spacing must be positive")
    if padding < 1:
        raise ParameterError("padding must be at least one voxel")
    P = c.points
    lo, hi = P.min(axis=0), P.max(axis=0)
    origin = lo - (padding + 0.5) * spacing
    top = np.floor((hi - origin) / spacing).astype(np.int64)
    dims = top + padding + 1
    cells = np.zeros(tuple(int(d) for d in dims), dtype=bool)
    idx = np.floor((P - origin) / spacing).astype(np.int64)
    idx = np.minimum(idx, dims - 1)
    cells[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(origin, spacing, cells)


def downsample(points, spacing: float) -> np.ndarray:
    """Keep one point (the first, in input order) per occupied voxel of size ``spacing``."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        return P
    keys = np.floor((P - P.min(axis=0)) / spacing).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return P[np.sort(first)]
