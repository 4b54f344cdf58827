"""Grasp success models and the grasp configuration prior.

A grasp is a palm pose plus a scalar finger preshape.  The palm frame's
x-axis is the approach direction and its y-axis the direction the fingers
close along.  Models return a success probability and its gradient over
``(palm translation 3, palm rotation increment 3, preshape 1)``, with the
rotation increment applied on the right (``R exp(delta)``).
"""

from __future__ import annotations

import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometryError, FormatError, ParameterError
from .geom import PointCloud, Pose3, hat, so3_exp, so3_log
from .robot import GripperGeometry

GMOD_MAGIC = b"GMOD1"
GMOD_AXES = ("offset_x", "offset_y", "offset_z", "elevation", "azimuth", "preshape")

_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_HAT_EX = hat(_EX)
_HAT_EY = hat(_EY)


@dataclass(frozen=True, eq=False)
class GraspConfig:
    palm: Pose3
    preshape: float

    @property
    def approach(self) -> np.ndarray:
        return self.palm.R[:, 0]


@dataclass(frozen=True, eq=False)
class ObjectSummary:
    centroid: np.ndarray
    axes: np.ndarray
    extents: np.ndarray
    cloud: PointCloud | None = None


def summarize_object(Z_O: PointCloud) -> ObjectSummary:
    """Centroid, principal axes (columns, right-handed) and half-extents.

    Extents are sorted descending and the axes are permuted to match.
    """
    P = Z_O.points
    if len(P) < 4:
        raise DegenerateGeometryError("need at least 4 points to summarize an object")
    c = P.mean(axis=0)
    X = P - c
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] <= 0 or sv[-1] / sv[0] < 1e-9:
        raise DegenerateGeometryError("object points are coplanar or collinear")
    _, V = np.linalg.eigh(X.T @ X)
    proj = X @ V
    ext = 0.5 * (proj.max(axis=0) - proj.min(axis=0))
    order = np.argsort(-ext, kind="stable")
    V, ext = V[:, order], ext[order]
    for k in range(3):
        if V[np.argmax(np.abs(V[:, k])), k] < 0:
            V[:, k] = -V[:, k]
    if np.linalg.det(V) < 0:
        V[:, 2] = -V[:, 2]
    return ObjectSummary(c, V, ext, Z_O)


def _smooth_abs(x, eta):
    r = np.sqrt(x * x + eta * eta)
    return r - eta, x / r


def required_width(closing_axis, o: ObjectSummary, eta: float = 1e-3):
    """Object width along the closing axis (box support width) and its gradient."""
    proj = o.axes.T @ closing_axis
    a, da = _smooth_abs(proj, eta)
    w = 2.0 * float(o.extents @ a)
    dw = 2.0 * o.axes @ (o.extents * da)
    return w, dw


class GraspModel(Protocol):
    def logit(self, palm_pos, palm_R, preshape, o: ObjectSummary) -> tuple[float, np.ndarray]:
        ...


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


class _LogitModel:
    """Shared probability-space helpers for models that produce a logit."""

    def logit(self, palm_pos, palm_R, preshape, o):  # pragma: no cover - interface
        raise NotImplementedError

    def success(self, grasp: GraspConfig, o: ObjectSummary) -> float:
        z, _ = self.logit(grasp.palm.translation, grasp.palm.R, grasp.preshape, o)
        return _sigmoid(z)

    def gradient(self, grasp: GraspConfig, o: ObjectSummary) -> np.ndarray:
        z, dz = self.logit(grasp.palm.translation, grasp.palm.R, grasp.preshape, o)
        s = _sigmoid(z)
        return s * (1.0 - s) * dz

    def log_success(self, palm_pos, palm_R, preshape, o) -> tuple[float, np.ndarray]:
        """``ln F`` and its gradient; stable for very negative logits."""
        z, dz = self.logit(palm_pos, palm_R, preshape, o)
        return -float(np.logaddexp(0.0, -z)), (1.0 - _sigmoid(z)) * dz


@dataclass(frozen=True)
class SurrogateParams:
    w_dist: float = 1.0
    w_align: float = 1.0
    w_width: float = 1.0
    bias: float = 2.0
    sigma_pos: float = 0.05
    sigma_width: float = 0.02
    standoff: float = 0.12


class SurrogateGraspModel(_LogitModel):
    """Analytic differentiable stand-in for a learned grasp classifier.

    logit = w_dist * a_dist + w_align * a_align + w_width * a_width + bias, with

    * ``a_dist = -|p - (c - standoff * a)|^2 / sigma_pos^2``
    * ``a_align = a . (c - p) / |c - p|``
    * ``a_width = -(opening(preshape) - required_width)^2 / sigma_width^2``

    where ``a`` is the palm x-axis and ``c`` the object centroid.
    """

    def __init__(self, gripper: GripperGeometry | None = None, params: SurrogateParams | None = None):
        if gripper is None:
            from .robot import default_arm

            gripper = default_arm()[1]
        self.gripper = gripper
        self.params = params or SurrogateParams()

    def logit(self, palm_pos, palm_R, preshape, o: ObjectSummary):
        prm = self.params
        p = np.asarray(palm_pos, dtype=float)
        R = np.asarray(palm_R, dtype=float)
        a = R[:, 0]
        y = R[:, 1]
        da_dd = -R @ _HAT_EX
        dy_dd = -R @ _HAT_EY
        c = o.centroid

        r = p - c + prm.standoff * a
        sp2 = prm.sigma_pos ** 2
        a_dist = -float(r @ r) / sp2
        g_dist_p = -2.0 * r / sp2
        g_dist_a = prm.standoff * g_dist_p

        v = c - p
        L = max(math.sqrt(float(v @ v)), 1e-9)
        u = v / L
        a_align = float(a @ u)
        g_align_p = -(a - u * float(u @ a)) / L
        g_align_a = u

        w_req, dw_dy = required_width(y, o)
        gap = self.gripper.opening(preshape) - w_req
        sw2 = prm.sigma_width ** 2
        a_width = -gap * gap / sw2
        g_width_q = -2.0 * gap * self.gripper.opening_gain / sw2
        g_width_y = 2.0 * gap / sw2 * dw_dy

        z = prm.w_dist * a_dist + prm.w_align * a_align + prm.w_width * a_width + prm.bias
        grad = np.empty(7)
        grad[:3] = prm.w_dist * g_dist_p + prm.w_align * g_align_p
        grad[3:6] = da_dd.T @ (prm.w_dist * g_dist_a + prm.w_align * g_align_a) + \
            prm.w_width * (dy_dd.T @ g_width_y)
        grad[6] = prm.w_width * g_width_q
        return z, grad

    def ideal_palm_position(self, approach, o: ObjectSummary) -> np.ndarray:
        return o.centroid - self.params.standoff * np.asarray(approach, dtype=float)


def surrogate_success(grasp: GraspConfig, o: ObjectSummary,
                      model: SurrogateGraspModel | None = None) -> float:
    return (model or SurrogateGraspModel()).success(grasp, o)


# ---------------------------------------------------------------------------
# tabulated models
# ---------------------------------------------------------------------------

def canonical_palm_rotation(approach, o: ObjectSummary) -> np.ndarray:
    """Palm rotation with the given approach; closing axis perpendicular to the major axis."""
    a = np.asarray(approach, dtype=float)
    a = a / np.linalg.norm(a)
    y = np.cross(o.axes[:, 0], a)
    n = np.linalg.norm(y)
    if n < 1e-9:
        y = np.cross(o.axes[:, 1], a)
        n = np.linalg.norm(y)
    y /= n
    return np.column_stack([a, y, np.cross(a, y)])


def approach_from_angles(elevation: float, azimuth: float, o: ObjectSummary) -> np.ndarray:
    """World approach direction; elevation tilts toward the object's major axis."""
    a_o = np.array([math.sin(elevation), math.cos(elevation) * math.cos(azimuth),
                    math.cos(elevation) * math.sin(azimuth)])
    return o.axes @ a_o


@dataclass(frozen=True, eq=False)
class GridAxis:
    count: int
    lo: float
    hi: float

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)


class TabulatedGraspModel(_LogitModel):
    """Logits on a regular 6-D grid, interpolated multilinearly.

    Grid coordinates: palm offset in the object's principal frame (3),
    approach elevation and azimuth in that frame, and preshape.  Queries
    outside the grid are clamped to the boundary (zero gradient along a
    clamped coordinate).
    """

    def __init__(self, axes: Sequence[GridAxis], logits: np.ndarray):
        if len(axes) != len(GMOD_AXES):
            raise FormatError(f"expected {len(GMOD_AXES)} grid axes, got {len(axes)}")
        for ax in axes:
            if ax.count < 2 or not ax.hi > ax.lo:
                raise FormatError("grid axes need >= 2 samples and increasing range")
        logits = np.asarray(logits, dtype=float)
        if logits.shape != tuple(a.count for a in axes):
            raise FormatError("logit array shape does not match axis counts")
        self.axes = tuple(axes)
        self.logits = logits

    def features(self, palm_pos, palm_R, preshape, o: ObjectSummary):
        """Grid coordinates and their 6x7 Jacobian w.r.t. (p, delta, preshape)."""
        A = o.axes
        off = A.T @ (np.asarray(palm_pos, dtype=float) - o.centroid)
        R = np.asarray(palm_R, dtype=float)
        a_o = A.T @ R[:, 0]
        da_o = A.T @ (-R @ _HAT_EX)
        s0 = min(1.0, max(-1.0, a_o[0]))
        el = math.asin(s0)
        az = math.atan2(a_o[2], a_o[1])
        J = np.zeros((6, 7))
        J[:3, :3] = A.T
        cos_el = max(math.sqrt(max(1.0 - s0 * s0, 0.0)), 1e-9)
        J[3, 3:6] = da_o[0] / cos_el
        rho2 = max(a_o[1] ** 2 + a_o[2] ** 2, 1e-18)
        J[4, 3:6] = (-a_o[2] * da_o[1] + a_o[1] * da_o[2]) / rho2
        J[5, 6] = 1.0
        return np.array([off[0], off[1], off[2], el, az, float(preshape)]), J

    def interpolate(self, x) -> tuple[float, np.ndarray]:
        """Multilinear value and gradient at grid coordinates ``x``."""
        n = len(self.axes)
        idx = np.empty(n, dtype=np.int64)
        frac = np.empty(n)
        active = np.empty(n, dtype=bool)
        inv_h = np.empty(n)
        for k, ax in enumerate(self.axes):
            u = (x[k] - ax.lo) / ax.step
            active[k] = 0.0 < u < ax.count - 1
            u = min(max(u, 0.0), ax.count - 1.0)
            i = min(int(math.floor(u)), ax.count - 2)
            idx[k], frac[k], inv_h[k] = i, u - i, 1.0 / ax.step
        val = 0.0
        grad = np.zeros(n)
        for corner in itertools.product((0, 1), repeat=n):
            L = self.logits[tuple(idx + np.array(corner))]
            w = np.where(corner, frac, 1.0 - frac)
            val += L * float(np.prod(w))
            for k in range(n):
                if not active[k]:
                    continue
                wk = np.prod(np.delete(w, k))
                grad[k] += L * wk * (inv_h[k] if corner[k] else -inv_h[k])
        return val, grad

    def logit(self, palm_pos, palm_R, preshape, o: ObjectSummary):
        x, J = self.features(palm_pos, palm_R, preshape, o)
        val, g = self.interpolate(x)
        return val, J.T @ g


def write_tabulated_model(dest, axes: Sequence[GridAxis], logits: np.ndarray) -> None:
    buf = io.BytesIO()
    buf.write(GMOD_MAGIC)
    buf.write(struct.pack("<I", len(axes)))
    for ax in axes:
        buf.write(struct.pack("<Idd", ax.count, ax.lo, ax.hi))
    buf.write(np.ascontiguousarray(logits, dtype="<f4").tobytes())
    data = buf.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(data)
    else:
        dest.write(data)


def load_tabulated_model(src) -> TabulatedGraspModel:
    """Read a GMOD1 file: magic, axis count, (count, lo, hi) per axis, float32 logits."""
    data = Path(src).read_bytes() if isinstance(src, (str, Path)) else src.read()
    if data[:5] != GMOD_MAGIC:
        raise FormatError("bad GMOD1 magic")
    try:
        (ndim,) = struct.unpack_from("<I", data, 5)
        off = 9
        axes = []
        for _ in range(ndim):
            count, lo, hi = struct.unpack_from("<Idd", data, off)
            off += struct.calcsize("<Idd")
            if count < 2 or not hi > lo:
                raise FormatError(f"grid axis not monotonic: count={count}, lo={lo}, hi={hi}")
            axes.append(GridAxis(count, lo, hi))
    except struct.error as exc:
        raise FormatError(f"truncated GMOD1 header: {exc}") from exc
    n = int(np.prod([a.count for a in axes]))
    if len(data) - off != 4 * n:
        raise FormatError(f"expected {4 * n} bytes of logits, found {len(data) - off}")
    logits = np.frombuffer(data[off:], dtype="<f4").astype(float).reshape([a.count for a in axes])
    return TabulatedGraspModel(axes, logits)


def tabulate_model(model: _LogitModel, o: ObjectSummary, axes: Sequence[GridAxis]) -> np.ndarray:
    """Sample a model's logits on a grid, using the canonical palm roll."""
    grids = [np.linspace(a.lo, a.hi, a.count) for a in axes]
    out = np.empty([a.count for a in axes])
    for ie, el in enumerate(grids[3]):
        for ia, az in enumerate(grids[4]):
            R = canonical_palm_rotation(approach_from_angles(el, az, o), o)
            for ix, iy, iz in itertools.product(*(range(a.count) for a in axes[:3])):
                p = o.centroid + o.axes @ np.array([grids[0][ix], grids[1][iy], grids[2][iz]])
                for iq, qh in enumerate(grids[5]):
                    out[ix, iy, iz, ie, ia, iq] = model.logit(p, R, qh, o)[0]
    return out


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PriorComponent:
    """Gaussian over (palm offset 3, palm rotation vector 3, preshape) in the object frame."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray
    label: str = ""


@dataclass(frozen=True, eq=False)
class GraspPrior:
    components: tuple[PriorComponent, ...]
    preshape_bounds: tuple[float, float] = (0.0, 1.2)

    def __post_init__(self):
        w = np.array([c.weight for c in self.components], dtype=float)
        if len(w) == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("prior weights must be non-negative with positive sum")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("prior weights must sum to one")

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])


def grasp_from_object_frame(x, o: ObjectSummary, preshape_bounds=(0.0, 1.2)) -> GraspConfig:
    x = np.asarray(x, dtype=float)
    A = o.axes
    palm = Pose3.from_rt(A @ so3_exp(x[3:6]), o.centroid + A @ x[:3])
    q = float(min(max(x[6], preshape_bounds[0]), preshape_bounds[1]))
    return GraspConfig(palm, q)


def grasp_to_object_frame(g: GraspConfig, o: ObjectSummary) -> np.ndarray:
    A = o.axes
    return np.concatenate([A.T @ (g.palm.translation - o.centroid),
                           so3_log(A.T @ g.palm.R), [g.preshape]])


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_prior(p: GraspPrior, o: ObjectSummary, n: int, seed=None,
                 return_components: bool = False):
    """Draw ``n`` grasps: pick a component by weight, then a Gaussian draw."""
    if n < 1:
        raise ParameterError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(len(p.components), size=n, p=p.weights)
    roots = [_psd_sqrt(np.asarray(c.cov, dtype=float)) for c in p.components]
    noise = rng.standard_normal((n, 7))
    out = []
    for i in range(n):
        c = p.components[comp[i]]
        x = np.asarray(c.mean, dtype=float) + roots[comp[i]] @ noise[i]
        out.append(grasp_from_object_frame(x, o, p.preshape_bounds))
    if return_components:
        return out, comp
    return out


@dataclass(frozen=True)
class PriorSettings:
    standoff: float = 0.12
    side_tilt: float = 0.35
    sigma_pos: float = 0.01
    sigma_rot: float = 0.1
    sigma_preshape: float = 0.05


def footprint_axes(o: ObjectSummary):
    """Vertical half-height, footprint size and minor/major horizontal directions.

    The minor direction is the hull edge normal of minimum width; the
    footprint size is half the square root of the hull area.
    """
    P = o.cloud.points if o.cloud is not None else None
    if P is None:
        raise DegenerateGeometryError("object summary has no source cloud")
    half_h = 0.5 * float(P[:, 2].max() - P[:, 2].min())
    xy = P[:, :2]
    try:
        hull = ConvexHull(xy)
        V = xy[hull.vertices]
        area = float(hull.volume)
    except QhullError as exc:
        raise DegenerateGeometryError("object footprint is degenerate") from exc
    best_n, best_w = None, math.inf
    for k in range(len(V)):
        e = V[(k + 1) % len(V)] - V[k]
        nrm = np.array([-e[1], e[0]]) / np.linalg.norm(e)
        proj = V @ nrm
        w = float(proj.max() - proj.min())
        if w < best_w - 1e-12:
            best_n, best_w = nrm, w
    u_min = np.array([best_n[0], best_n[1], 0.0])
    u_maj = np.array([-best_n[1], best_n[0], 0.0])
    return half_h, 0.5 * math.sqrt(area), u_min, u_maj


def default_prior(o: ObjectSummary, gripper: GripperGeometry | None = None,
                  settings: PriorSettings | None = None, robot_base=(0.0, 0.0, 0.0)) -> GraspPrior:
    """Two-mode prior: a top grasp and a side grasp about the object centroid.

    Mode weights follow the aspect ratio: ``w_side = h / (h + w)`` with
    ``h`` the half-height and ``w`` the footprint size.
    """
    if gripper is None:
        from .robot import default_arm

        gripper = default_arm()[1]
    st = settings or PriorSettings()
    half_h, half_w, u_min, u_maj = footprint_axes(o)
    ez = np.array([0.0, 0.0, 1.0])

    # top: approach straight down, fingers close across the minor footprint width
    a_top = -ez
    R_top = np.column_stack([a_top, u_min, np.cross(a_top, u_min)])

    # side: approach along the minor horizontal axis from the robot's side, tilted down
    to_obj = o.centroid - np.asarray(robot_base, dtype=float)
    if float(u_min @ to_obj) < 0:
        u_min = -u_min
        u_maj = -u_maj
    a_side = math.cos(st.side_tilt) * u_min - math.sin(st.side_tilt) * ez
    up = ez - a_side * float(a_side @ ez)
    up /= np.linalg.norm(up)
    w_up, _ = required_width(up, o)
    w_maj, _ = required_width(u_maj, o)
    y_side = u_maj if w_maj <= w_up else up
    R_side = np.column_stack([a_side, y_side, np.cross(a_side, y_side)])
    if np.linalg.det(R_side) < 0:
        R_side[:, 1] = -R_side[:, 1]
        R_side[:, 2] = np.cross(R_side[:, 0], R_side[:, 1])

    comps = []
    w_side = half_h / (half_h + half_w)
    cov = np.diag([st.sigma_pos ** 2] * 3 + [st.sigma_rot ** 2] * 3 + [st.sigma_preshape ** 2])
    for label, R, w in (("top", R_top, 1.0 - w_side), ("side", R_side, w_side)):
        a = R[:, 0]
        p = o.centroid - st.standoff * a
        width, _ = required_width(R[:, 1], o)
        g = GraspConfig(Pose3.from_rt(R, p), gripper.preshape_for_width(width))
        comps.append(PriorComponent(w, grasp_to_object_frame(g, o), cov.copy(), label))
    return GraspPrior(tuple(comps), (gripper.preshape_lower, gripper.preshape_upper))
