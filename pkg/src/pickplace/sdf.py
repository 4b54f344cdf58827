"""Truncated discretized signed distance fields over voxel occupancy.

The field is built by brushfire marching: starting from the occupied
cells, a wavefront is pushed outward one distance shell at a time (every
integer voxel offset with the same squared length forms a shell), and the
first shell that reaches a cell fixes its distance.  Interior cells are
handled the same way with the occupied boundary cells as seeds and the
sign flipped.  Marching stops at the truncation distance.

Because each cell's value depends only on occupancy within the truncation
radius, a local re-march after inserting new geometry reproduces a full
rebuild exactly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, EmptySceneError, FormatError, ParameterError
from .geom import OccupancyGrid, PointCloud, Pose3, hat, voxelize

TSDF_MAGIC = b"TSDF1"
_HEADER = struct.Struct("<5s3Id3dd")

DEFAULT_SPACING = 0.01
DEFAULT_TRUNCATION_VOXELS = 8


@dataclass(frozen=True, eq=False)
class TruncatedSdf:
    occupancy: OccupancyGrid
    distance: np.ndarray
    gradient: np.ndarray
    eps_trunc: float

    def __post_init__(self):
        for arr in (self.distance, self.gradient):
            arr.flags.writeable = False

    @property
    def origin(self) -> np.ndarray:
        return self.occupancy.origin

    @property
    def spacing(self) -> float:
        return self.occupancy.spacing

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.dims


@dataclass(frozen=True, eq=False)
class CollisionQuerySet:
    """Object points and robot sphere centers, both in the object-placement frame.

    Robot entries are sphere centers; their radii are subtracted from the
    queried distance rather than sampling the sphere surfaces.
    """

    object_points: PointCloud
    robot_points: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3))))
    robot_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        radii = np.asarray(self.robot_radii, dtype=float).reshape(-1)
        if len(radii) != len(self.robot_points):
            raise ParameterError("one radius per robot point is required")
        object.__setattr__(self, "robot_radii", radii)

    def __len__(self) -> int:
        return len(self.object_points) + len(self.robot_points)


@dataclass(frozen=True)
class MinSdfResult:
    distance: float
    point: np.ndarray
    gradient: np.ndarray
    which: str
    index: int
    object_min: float
    robot_min: float


# ---------------------------------------------------------------------------
# brushfire
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _offset_shells(r2max: int) -> tuple[tuple[int, np.ndarray], ...]:
    """Integer offsets grouped by squared length, ascending, up to ``r2max``."""
    r = int(math.isqrt(r2max))
    ax = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    sq = (off * off).sum(axis=1)
    keep = (sq <= r2max) & (sq > 0)
    off, sq = off[keep], sq[keep]
    shells = []
    for k in np.unique(sq):
        shells.append((int(k), off[sq == k]))
    return tuple(shells)


def _r2max(eps_trunc: float, spacing: float) -> int:
    return int(math.floor((eps_trunc / spacing) ** 2 + 1e-9))


def _march(seeds: np.ndarray, targets: np.ndarray, spacing: float, eps_trunc: float) -> np.ndarray:
    """Unsigned distance from each target cell to the nearest seed cell, clamped."""
    r2max = _r2max(eps_trunc, spacing)
    pad = int(math.isqrt(r2max))
    dist = np.full(targets.shape, eps_trunc)
    unassigned = targets & ~seeds
    if not unassigned.any() or not seeds.any():
        return dist
    S = np.pad(seeds, pad)
    nx, ny, nz = targets.shape
    hit = np.empty_like(targets)
    for k, offs in _offset_shells(r2max):
        hit.fill(False)
        for dx, dy, dz in offs:
            np.logical_or(
                hit,
                S[pad + dx: pad + dx + nx, pad + dy: pad + dy + ny, pad + dz: pad + dz + nz],
                out=hit,
            )
        hit &= unassigned
        if hit.any():
            dist[hit] = min(math.sqrt(k) * spacing, eps_trunc)
            unassigned &= ~hit
            if not unassigned.any():
                break
    return dist


def _surface_mask(occupied: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one free 6-neighbor (outside the grid counts as free)."""
    P = np.pad(occupied, 1, constant_values=False)
    core = P[1:-1, 1:-1, 1:-1]
    all_nb = (
        P[:-2, 1:-1, 1:-1] & P[2:, 1:-1, 1:-1]
        & P[1:-1, :-2, 1:-1] & P[1:-1, 2:, 1:-1]
        & P[1:-1, 1:-1, :-2] & P[1:-1, 1:-1, 2:]
    )
    return core & ~all_nb


def _signed_distance(occupied: np.ndarray, spacing: float, eps_trunc: float) -> np.ndarray:
    surface = _surface_mask(occupied)
    interior = occupied & ~surface
    outside = _march(occupied, ~occupied, spacing, eps_trunc)
    inside = _march(surface, interior, spacing, eps_trunc)
    return np.where(occupied, np.where(interior, -inside, 0.0), outside)


def build_sdf(occ: OccupancyGrid, eps_trunc: float | None = None) -> TruncatedSdf:
    """Brushfire a truncated signed distance field from an occupancy grid."""
    s = occ.spacing
    if eps_trunc is None:
        eps_trunc = DEFAULT_TRUNCATION_VOXELS * s
    if eps_trunc < 2 * s - 1e-12:
        raise ParameterError("truncation distance must be at least two voxels")
    cells = occ.cells
    if not cells.any():
        raise EmptySceneError("occupancy grid has no occupied cell")
    if cells.all():
        raise EmptySceneError("occupancy grid is fully occupied")
    dist = _signed_distance(cells, s, float(eps_trunc))
    return compute_gradients(TruncatedSdf(occ, dist, np.zeros(dist.shape + (3,)), float(eps_trunc)))


def compute_gradients(s: TruncatedSdf) -> TruncatedSdf:
    """Finite-difference gradient per voxel: central inside, one-sided at the border."""
    g = np.stack(np.gradient(np.asarray(s.distance), s.spacing), axis=-1)
    return TruncatedSdf(s.occupancy, np.array(s.distance), g, s.eps_trunc)


def build_scene_sdf(cloud: PointCloud, spacing: float = DEFAULT_SPACING,
                    eps_trunc: float | None = None) -> TruncatedSdf:
    """Voxelize a cloud with enough padding for the full band, then build."""
    if eps_trunc is None:
        eps_trunc = DEFAULT_TRUNCATION_VOXELS * spacing
    pad = int(math.ceil(eps_trunc / spacing)) + 1
    return build_sdf(voxelize(cloud, spacing, pad), eps_trunc)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

def query_points(s: TruncatedSdf, points, exact_gradient: bool = False, gradient: bool = True):
    """Trilinear distance and gradient at many points.

    By default the stored per-voxel gradients are interpolated.  With
    ``exact_gradient=True`` the returned gradient is the derivative of the
    interpolated distance itself, which is what an optimizer needs for
    consistent line searches.  Points outside the lattice of voxel centers
    get ``+eps_trunc`` and a zero gradient.  ``gradient=False`` skips the
    gradient and returns ``None`` in its place.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(P)
    d = np.full(n, s.eps_trunc)
    g = np.zeros((n, 3)) if gradient else None
    if n == 0:
        return d, g
    dims = np.array(s.dims)
    u = (P - s.origin) / s.spacing - 0.5
    inside = np.all((u >= 0.0) & (u <= dims - 1), axis=1)
    if not inside.any():
        return d, g
    u = u[inside]
    i0 = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    f = u - i0
    i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    D = s.distance
    c000 = D[i, j, k]
    c100 = D[i + 1, j, k]
    c010 = D[i, j + 1, k]
    c110 = D[i + 1, j + 1, k]
    c001 = D[i, j, k + 1]
    c101 = D[i + 1, j, k + 1]
    c011 = D[i, j + 1, k + 1]
    c111 = D[i + 1, j + 1, k + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    d[inside] = c0 * (1 - fz) + c1 * fz
    if not gradient:
        return d, None
    if exact_gradient:
        gx = ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz) + (
            (c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz
        gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        gz = c1 - c0
        g[inside] = np.stack([gx, gy, gz], axis=1) / s.spacing
    else:
        G = s.gradient
        w = [
            ((1 - fx) * (1 - fy) * (1 - fz), 0, 0, 0),
            (fx * (1 - fy) * (1 - fz), 1, 0, 0),
            ((1 - fx) * fy * (1 - fz), 0, 1, 0),
            (fx * fy * (1 - fz), 1, 1, 0),
            ((1 - fx) * (1 - fy) * fz, 0, 0, 1),
            (fx * (1 - fy) * fz, 1, 0, 1),
            ((1 - fx) * fy * fz, 0, 1, 1),
            (fx * fy * fz, 1, 1, 1),
        ]
        acc = np.zeros((len(u), 3))
        for wt, a, b, c in w:
            acc += wt[:, None] * G[i + a, j + b, k + c]
        g[inside] = acc
    return d, g


def query(s: TruncatedSdf, point, exact_gradient: bool = False) -> tuple[float, np.ndarray]:
    d, g = query_points(s, np.asarray(point, dtype=float).reshape(1, 3), exact_gradient)
    return float(d[0]), g[0]


def min_sdf_over_set(s: TruncatedSdf | None, x_p: Pose3, q: CollisionQuerySet,
                     exact_gradient: bool = True, eps_trunc: float | None = None) -> MinSdfResult:
    """Minimum distance over the posed union of object points and robot spheres.

    ``s=None`` stands for an empty scene: every query returns ``eps_trunc``.
    """
    if len(q) == 0:
        raise EmptyInputError("collision query set is empty")
    R, t = x_p.R, x_p.translation
    obj = q.object_points.points @ R.T + t
    rob = q.robot_points.points @ R.T + t
    if s is None:
        far = eps_trunc if eps_trunc is not None else math.inf
        d_obj = np.full(len(obj), far)
        d_rob = np.full(len(rob), far) - q.robot_radii
        g_obj, g_rob = np.zeros((len(obj), 3)), np.zeros((len(rob), 3))
    else:
        d_obj, g_obj = query_points(s, obj, exact_gradient)
        d_rob, g_rob = query_points(s, rob, exact_gradient)
        d_rob = d_rob - q.robot_radii
    obj_min = float(d_obj.min()) if len(d_obj) else math.inf
    rob_min = float(d_rob.min()) if len(d_rob) else math.inf
    if obj_min <= rob_min:
        i = int(np.argmin(d_obj))
        return MinSdfResult(obj_min, obj[i], g_obj[i], "object", i, obj_min, rob_min)
    i = int(np.argmin(d_rob))
    return MinSdfResult(rob_min, rob[i], g_rob[i], "robot", i, obj_min, rob_min)


def collision_margin(s: TruncatedSdf | None, x_p: Pose3, q: CollisionQuerySet,
                     eps: float) -> tuple[float, np.ndarray]:
    """Residual ``eps - min_sdf`` (satisfied iff <= 0) and its gradient.

    The gradient is over ``(translation, rotation increment)`` of ``x_p``,
    with the increment applied as a right perturbation.
    """
    if eps < 0:
        raise ParameterError("collision margin must be non-negative")
    res = min_sdf_over_set(s, x_p, q, exact_gradient=True)
    if res.which == "object":
        v = q.object_points.points[res.index]
    else:
        v = q.robot_points.points[res.index]
    R = x_p.R
    grad = np.empty(6)
    grad[:3] = -res.gradient
    grad[3:] = -hat(v) @ (R.T @ res.gradient)
    return eps - res.distance, grad


# ---------------------------------------------------------------------------
# incremental update
# ---------------------------------------------------------------------------

def _band_cells(s: TruncatedSdf) -> int:
    return int(math.isqrt(_r2max(s.eps_trunc, s.spacing)))


def update_sdf(s: TruncatedSdf, placed_object: PointCloud, at: Pose3) -> TruncatedSdf:
    """Fuse a placed object into the field, re-marching only the affected region.

    If the posed object leaves the grid, the grid is grown on the same
    lattice and rebuilt.
    """
    occ = s.occupancy
    P = at.apply(placed_object.points)
    if len(P) == 0:
        return s
    sp = occ.spacing
    dims = np.array(occ.dims)
    idx = occ.cell_index(P)
    in_grid = np.all((idx >= 0) & (idx < dims), axis=1)
    if in_grid.all() and occ.cells[idx[:, 0], idx[:, 1], idx[:, 2]].all():
        return s
    band = _band_cells(s) + 1
    if np.any(idx - band < 0) or np.any(idx + band >= dims):
        return _grow_and_rebuild(s, idx, band)
    cells = np.array(occ.cells)
    cells[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    changed = cells & ~occ.cells
    if not changed.any():
        return s
    ch = np.argwhere(changed)
    r = _band_cells(s)
    lo = np.maximum(ch.min(axis=0) - 1 - r, 0)
    hi = np.minimum(ch.max(axis=0) + 1 + r, dims - 1)
    clo = np.maximum(lo - r, 0)
    chi = np.minimum(hi + r, dims - 1)
    surface = _surface_mask(cells)
    ctx = tuple(slice(a, b + 1) for a, b in zip(clo, chi))
    sub_occ = cells[ctx]
    sub_surface = surface[ctx]
    sub_interior = sub_occ & ~sub_surface
    outside = _march(sub_occ, ~sub_occ, sp, s.eps_trunc)
    inside = _march(sub_surface, sub_interior, sp, s.eps_trunc)
    sub = np.where(sub_occ, np.where(sub_interior, -inside, 0.0), outside)
    dist = np.array(s.distance)
    inner = tuple(slice(a - c, b - c + 1) for a, b, c in zip(lo, hi, clo))
    dist[tuple(slice(a, b + 1) for a, b in zip(lo, hi))] = sub[inner]
    new_occ = OccupancyGrid(occ.origin, sp, cells)
    return compute_gradients(TruncatedSdf(new_occ, dist, s.gradient, s.eps_trunc))


def _grow_and_rebuild(s: TruncatedSdf, idx: np.ndarray, band: int) -> TruncatedSdf:
    occ = s.occupancy
    dims = np.array(occ.dims)
    lo = np.minimum(idx.min(axis=0) - band, 0)
    hi = np.maximum(idx.max(axis=0) + band, dims - 1)
    new_dims = hi - lo + 1
    cells = np.zeros(tuple(int(d) for d in new_dims), dtype=bool)
    off = -lo
    cells[off[0]: off[0] + dims[0], off[1]: off[1] + dims[1], off[2]: off[2] + dims[2]] = occ.cells
    j = idx + off
    cells[j[:, 0], j[:, 1], j[:, 2]] = True
    origin = occ.origin + lo * occ.spacing
    return build_sdf(OccupancyGrid(origin, occ.spacing, cells), s.eps_trunc)


# ---------------------------------------------------------------------------
# binary dump
# ---------------------------------------------------------------------------

def dump_sdf(s: TruncatedSdf, dest) -> None:
    """Write the TSDF1 little-endian binary snapshot to a path or binary file."""
    header = _HEADER.pack(TSDF_MAGIC, *s.dims, s.spacing, *s.origin, s.eps_trunc)
    payload = header + np.ascontiguousarray(s.distance, dtype="<f4").tobytes() + \
        np.ascontiguousarray(s.gradient, dtype="<f4").tobytes()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(payload)
    else:
        dest.write(payload)


def load_sdf(src) -> TruncatedSdf:
    """Read a TSDF1 snapshot.  Occupancy is recovered as ``distance <= 0``."""
    data = Path(src).read_bytes() if isinstance(src, (str, Path)) else src.read()
    if len(data) < _HEADER.size:
        raise FormatError("file too short for TSDF1 header")
    magic, nx, ny, nz, spacing, ox, oy, oz, eps = _HEADER.unpack_from(data)
    if magic != TSDF_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n + 12 * n
    if len(data) != expected:
        raise FormatError(f"payload size {len(data)} != expected {expected}")
    buf = io.BytesIO(data[_HEADER.size:])
    dist = np.frombuffer(buf.read(4 * n), dtype="<f4").astype(float).reshape(nx, ny, nz)
    grad = np.frombuffer(buf.read(12 * n), dtype="<f4").astype(float).reshape(nx, ny, nz, 3)
    occ = OccupancyGrid(np.array([ox, oy, oz]), spacing, dist <= 0.0)
    return TruncatedSdf(occ, dist, grad, eps)
