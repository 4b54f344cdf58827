"""Scene files: primitive objects, partial-view point synthesis, generators and JSON I/O.

Layout used by the generators (robot base at the origin, tables at z = 0):

* grasp table ``x in [0.35, 0.75], y in [0.2, 0.6]``; the grasp target
  stands near its middle;
* place table ``x in [0.3, 1.0], y in [-0.8, -0.1]``; its far corner
  ``(1.0, -0.8)`` is out of the arm's reach.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from shapely.geometry import MultiPoint, Polygon

from ..costs import TaskParams
from ..errors import FormatError, ParameterError
from ..geom import PointCloud, Pose2, Pose3, rot_z
from ..planner.problem import PlacementSurface, ProblemSpec, SolverSettings

SCENE_SCHEMA = "pickplace.scene/1"
SHAPES = ("box", "cylinder", "points")

GRASP_TABLE = PlacementSurface(0.35, 0.75, 0.2, 0.6, 0.0)
PLACE_TABLE = PlacementSurface(0.3, 1.0, -0.8, -0.1, 0.0)
DEFAULT_VIEWPOINT = (0.5, 0.0, 1.2)
SAMPLING = 0.005


@dataclass(frozen=True, eq=False)
class SceneObject:
    """A primitive resting with its bottom at ``z``.

    ``size`` is ``(lx, ly, lz)`` for boxes and ``(radius, height)`` for
    cylinders; ``points`` holds object-frame points for ``shape="points"``
    (frame origin at the bottom center).  Spatial orientations are carried
    by ``rotation`` (a 3x3 matrix) and override ``yaw`` when present.
    """

    name: str
    shape: str
    size: tuple
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0
    rotation: np.ndarray | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.shape == "box" and (len(self.size) != 3 or min(self.size) <= 0):
            raise ParameterError("box size must be three positive lengths")
        if self.shape == "cylinder" and (len(self.size) != 2 or min(self.size) <= 0):
            raise ParameterError("cylinder size must be (radius, height), both positive")
        if self.shape == "points" and (self.points is None or len(self.points) < 4):
            raise ParameterError("point objects need at least 4 points")

    @property
    def height(self) -> float:
        if self.shape == "box":
            return float(self.size[2])
        if self.shape == "cylinder":
            return float(self.size[1])
        return float(np.ptp(self.points[:, 2]))

    @property
    def pose(self) -> Pose3:
        """Pose of the bottom-center frame."""
        R = self.rotation if self.rotation is not None else rot_z(self.yaw)
        return Pose3.from_rt(R, (self.x, self.y, self.z))

    def local_center(self) -> np.ndarray:
        """Center of mass in the bottom-center frame (uniform density)."""
        if self.shape == "points":
            return self.points.mean(axis=0)
        return np.array([0.0, 0.0, 0.5 * self.height])

    def center(self) -> np.ndarray:
        return self.pose.apply(self.local_center()[None])[0]

    def at(self, pose: Pose3) -> "SceneObject":
        """The same object with its bottom-center frame moved to ``pose``."""
        t = pose.translation
        return replace(self, x=float(t[0]), y=float(t[1]), z=float(t[2]), yaw=0.0,
                       rotation=np.array(pose.R))


def _grid(lo: float, hi: float, spacing: float) -> np.ndarray:
    """Samples at most ``spacing`` apart, both ends included (edges are seen exactly)."""
    n = max(int(math.ceil((hi - lo) / spacing - 1e-9)), 1)
    return np.linspace(lo, hi, n + 1)


def surface_samples(obj: SceneObject, spacing: float = SAMPLING) -> tuple[np.ndarray, np.ndarray]:
    """Object-frame surface points and outward normals on a regular grid."""
    if obj.shape == "points":
        P = np.asarray(obj.points, dtype=float)
        N = P - P.mean(axis=0)
        N /= np.maximum(np.linalg.norm(N, axis=1, keepdims=True), 1e-12)
        return P, N
    pts, nrm = [], []
    if obj.shape == "box":
        lx, ly, lz = obj.size
        h = np.array([lx, ly, lz]) / 2
        for ax in range(3):
            u, v = [k for k in range(3) if k != ax]
            gu = _grid(-h[u], h[u], spacing)
            gv = _grid(-h[v], h[v], spacing)
            U, V = np.meshgrid(gu, gv, indexing="ij")
            for s in (-1.0, 1.0):
                P = np.zeros((U.size, 3))
                P[:, u], P[:, v], P[:, ax] = U.ravel(), V.ravel(), s * h[ax]
                n = np.zeros(3)
                n[ax] = s
                pts.append(P)
                nrm.append(np.tile(n, (len(P), 1)))
        P = np.vstack(pts)
        P[:, 2] += h[2]
        return P, np.vstack(nrm)
    r, height = obj.size
    n_ang = max(int(math.ceil(2 * math.pi * r / spacing)), 8)
    ang = 2 * math.pi * (np.arange(n_ang) + 0.5) / n_ang
    zs = _grid(0.0, height, spacing)
    A, Z = np.meshgrid(ang, zs, indexing="ij")
    side = np.column_stack([r * np.cos(A.ravel()), r * np.sin(A.ravel()), Z.ravel()])
    side_n = np.column_stack([np.cos(A.ravel()), np.sin(A.ravel()), np.zeros(A.size)])
    pts.append(side)
    nrm.append(side_n)
    for rad in _grid(0.0, r, spacing):
        k = max(int(math.ceil(2 * math.pi * rad / spacing)), 1)
        a = 2 * math.pi * (np.arange(k) + 0.5) / k
        ring = np.column_stack([rad * np.cos(a), rad * np.sin(a)])
        for zc, nz in ((0.0, -1.0), (height, 1.0)):
            pts.append(np.column_stack([ring, np.full(k, zc)]))
            nrm.append(np.tile([0.0, 0.0, nz], (k, 1)))
    return np.vstack(pts), np.vstack(nrm)


def object_points(obj: SceneObject, viewpoint=DEFAULT_VIEWPOINT, spacing: float = SAMPLING,
                  full: bool = False) -> np.ndarray:
    """World points of an object as seen from ``viewpoint`` (back faces culled).

    ``full=True`` keeps every surface sample; that is the ground-truth
    geometry used by the evaluator.
    """
    P, N = surface_samples(obj, spacing)
    pose = obj.pose
    W = pose.apply(P)
    if full or viewpoint is None:
        return W
    Nw = N @ pose.R.T
    keep = np.einsum("ij,ij->i", Nw, np.asarray(viewpoint, dtype=float) - W) > 0
    return W[keep]


def footprint(obj: SceneObject) -> Polygon:
    """Convex 2D footprint of the true geometry."""
    P = object_points(obj, full=True, spacing=0.01)
    return MultiPoint([tuple(p) for p in P[:, :2]]).convex_hull


# ---------------------------------------------------------------------------
# scene file
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SceneFile:
    """One planning scene: grasp target, place-side clutter, task and surfaces.

    ``queue`` lists further objects (on the grasp table) to be placed one
    after another by sequential tasks; the grasp target is always placed
    first.
    """

    name: str
    surface: PlacementSurface
    target: SceneObject
    objects: tuple[SceneObject, ...]
    task: TaskParams
    grasp_clutter: tuple[SceneObject, ...] = ()
    grasp_surface_z: float = 0.0
    viewpoint: tuple = DEFAULT_VIEWPOINT
    queue: tuple[SceneObject, ...] = ()
    notes: dict = field(default_factory=dict)

    def cloud(self, objs, full: bool = False) -> PointCloud:
        pts = [object_points(o, self.viewpoint, full=full) for o in objs]
        return PointCloud(np.vstack(pts) if pts else np.zeros((0, 3)))

    def target_cloud(self, full: bool = False) -> PointCloud:
        return self.cloud([self.target], full)

    def place_cloud(self, full: bool = False) -> PointCloud:
        return self.cloud(self.objects, full)

    def grasp_clutter_cloud(self) -> PointCloud:
        return self.cloud(self.grasp_clutter)

    def problem(self, settings: SolverSettings | None = None, margin: float = 0.01,
                spacing: float = 0.01, alpha: float | None = None, **kw) -> ProblemSpec:
        task = self.task if alpha is None else replace(self.task, alpha=alpha)
        return ProblemSpec(self.target_cloud(), self.place_cloud(), self.surface, task,
                           grasp_table_z=self.grasp_surface_z,
                           grasp_clutter=self.grasp_clutter_cloud(), sdf_spacing=spacing,
                           margin=margin, settings=settings or SolverSettings(), **kw)


def _obj_to_dict(o: SceneObject) -> dict:
    d = {"name": o.name, "shape": o.shape, "size": [float(v) for v in o.size],
         "pose": [float(o.x), float(o.y), float(o.z), float(o.yaw)]}
    if o.rotation is not None:
        d["rotation"] = [[float(v) for v in row] for row in np.asarray(o.rotation)]
    if o.points is not None:
        d["points"] = [[float(v) for v in p] for p in np.asarray(o.points)]
    return d


def _obj_from_dict(d: dict) -> SceneObject:
    try:
        x, y, z, yaw = (float(v) for v in d["pose"])
        rot = d.get("rotation")
        pts = d.get("points")
        return SceneObject(str(d["name"]), str(d["shape"]), tuple(float(v) for v in d.get("size", ())),
                           x, y, z, yaw, None if rot is None else np.array(rot, dtype=float),
                           None if pts is None else np.array(pts, dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad object entry: {exc}") from exc


def _task_to_dict(t: TaskParams) -> dict:
    d = {"kind": t.kind, "alpha": float(t.alpha), "line_angle": float(t.line_angle),
         "tether": float(t.tether), "beta": float(t.beta), "ref": [float(v) for v in t.ref],
         "area_weight": float(t.area_weight), "length_weight": float(t.length_weight),
         "abs_mode": t.abs_mode, "target": None, "stack_base": None}
    if isinstance(t.target, Pose2):
        d["target"] = {"pose2": [float(t.target.x), float(t.target.y), float(t.target.theta)]}
    elif isinstance(t.target, Pose3):
        d["target"] = {"pose3": [float(v) for v in t.target.translation]
                       + [float(v) for v in t.target.rotation]}
    elif t.target is not None:
        d["target"] = {"point": [float(v) for v in np.asarray(t.target).ravel()]}
    if t.stack_base is not None:
        d["stack_base"] = [float(v) for v in np.asarray(t.stack_base)]
    return d


def _task_from_dict(d: dict) -> TaskParams:
    tgt = d.get("target")
    target = None
    if tgt is not None:
        if "pose2" in tgt:
            target = Pose2(*tgt["pose2"])
        elif "pose3" in tgt:
            v = tgt["pose3"]
            target = Pose3(np.array(v[:3]), np.array(v[3:]))
        elif "point" in tgt:
            target = np.array(tgt["point"], dtype=float)
        else:
            raise FormatError("task target needs pose2, pose3 or point")
    sb = d.get("stack_base")
    return TaskParams(d["kind"], float(d["alpha"]), target, float(d.get("line_angle", 0.0)),
                      None if sb is None else np.array(sb, dtype=float), float(d.get("tether", 10.0)),
                      float(d.get("beta", 100.0)), tuple(d.get("ref", (0.0, 0.0))),
                      float(d.get("area_weight", 1.0)), float(d.get("length_weight", 1.0)),
                      d.get("abs_mode", "elementwise"))


def scene_to_dict(s: SceneFile) -> dict:
    sf = s.surface
    return {
        "schema": SCENE_SCHEMA,
        "name": s.name,
        "surface": {"xmin": sf.xmin, "xmax": sf.xmax, "ymin": sf.ymin, "ymax": sf.ymax, "z": sf.z},
        "grasp_surface_z": float(s.grasp_surface_z),
        "viewpoint": [float(v) for v in s.viewpoint],
        "target": _obj_to_dict(s.target),
        "objects": [_obj_to_dict(o) for o in s.objects],
        "grasp_clutter": [_obj_to_dict(o) for o in s.grasp_clutter],
        "queue": [_obj_to_dict(o) for o in s.queue],
        "task": _task_to_dict(s.task),
        "notes": dict(s.notes),
    }


def scene_from_dict(d: dict) -> SceneFile:
    if d.get("schema") != SCENE_SCHEMA:
        raise FormatError(f"unsupported scene schema {d.get('schema')!r}")
    try:
        sf = d["surface"]
        return SceneFile(
            str(d["name"]),
            PlacementSurface(float(sf["xmin"]), float(sf["xmax"]), float(sf["ymin"]),
                             float(sf["ymax"]), float(sf.get("z", 0.0))),
            _obj_from_dict(d["target"]),
            tuple(_obj_from_dict(o) for o in d.get("objects", [])),
            _task_from_dict(d["task"]),
            tuple(_obj_from_dict(o) for o in d.get("grasp_clutter", [])),
            float(d.get("grasp_surface_z", 0.0)),
            tuple(float(v) for v in d.get("viewpoint", DEFAULT_VIEWPOINT)),
            tuple(_obj_from_dict(o) for o in d.get("queue", [])),
            dict(d.get("notes", {})),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scene file: {exc}") from exc
    except ParameterError as exc:
        raise FormatError(str(exc)) from exc


def dumps_scene(s: SceneFile) -> str:
    return json.dumps(scene_to_dict(s), indent=2, sort_keys=True) + "\n"


def write_scene(s: SceneFile, path) -> None:
    Path(path).write_text(dumps_scene(s))


def read_scene(path) -> SceneFile:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(d)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _random_primitive(rng, name: str, small: bool) -> SceneObject:
    if rng.random() < 0.6:
        if small:
            size = (rng.uniform(0.04, 0.08), rng.uniform(0.04, 0.08), rng.uniform(0.06, 0.14))
        else:
            size = (rng.uniform(0.05, 0.12), rng.uniform(0.05, 0.12), rng.uniform(0.04, 0.2))
        return SceneObject(name, "box", tuple(float(v) for v in size), 0.0, 0.0)
    if small:
        size = (rng.uniform(0.02, 0.035), rng.uniform(0.06, 0.14))
    else:
        size = (rng.uniform(0.025, 0.06), rng.uniform(0.04, 0.2))
    return SceneObject(name, "cylinder", tuple(float(v) for v in size), 0.0, 0.0)


def _scatter(rng, protos, surface: PlacementSurface, gap: float = 0.01, tries: int = 200,
             keep_out=()) -> list[SceneObject]:
    """Rejection-sample non-overlapping poses inside the surface; drops objects that never fit."""
    rect = Polygon([(surface.xmin, surface.ymin), (surface.xmax, surface.ymin),
                    (surface.xmax, surface.ymax), (surface.xmin, surface.ymax)])
    placed: list[SceneObject] = []
    shapes = [k.buffer(gap / 2) for k in keep_out]
    for proto in protos:
        for _ in range(tries):
            o = replace(proto, x=float(rng.uniform(surface.xmin, surface.xmax)),
                        y=float(rng.uniform(surface.ymin, surface.ymax)),
                        z=surface.z, yaw=float(rng.uniform(-math.pi, math.pi)))
            fp = footprint(o)
            if not rect.contains(fp):
                continue
            fb = fp.buffer(gap / 2)
            if any(fb.intersects(s) for s in shapes):
                continue
            placed.append(o)
            shapes.append(fb)
            break
    return placed


def generate_scene(seed: int, clutter_count: int = 5, kind: str = "target", alpha: float = 10.0,
                   name: str | None = None) -> SceneFile:
    """Random desk scene: one grasp target plus ``clutter_count`` place-side objects.

    If rejection sampling cannot fit every clutter object the count is
    reduced one at a time and the shortfall recorded in ``notes``.
    """
    if not 0 <= clutter_count <= 8:
        raise ParameterError("clutter_count must be in 0..8")
    rng = np.random.default_rng(seed)
    tproto = _random_primitive(rng, "target", small=True)
    target = replace(tproto, x=float(0.55 + rng.uniform(-0.05, 0.05)),
                     y=float(0.4 + rng.uniform(-0.05, 0.05)), z=GRASP_TABLE.z,
                     yaw=float(rng.uniform(-math.pi, math.pi)))
    protos = [_random_primitive(rng, f"clutter{k}", small=False) for k in range(clutter_count)]
    n = clutter_count
    while True:
        sub = np.random.default_rng([seed, n])
        placed = _scatter(sub, protos[:n], PLACE_TABLE)
        if len(placed) == n:
            break
        n -= 1
    notes = {"clutter_requested": clutter_count, "clutter_placed": n, "seed": seed}
    surf = PLACE_TABLE
    task_rng = np.random.default_rng([seed, 7919])
    if kind == "target":
        task = TaskParams("target", alpha, Pose2(float(task_rng.uniform(surf.xmin, surf.xmax)),
                                                 float(task_rng.uniform(surf.ymin, surf.ymax)),
                                                 float(task_rng.uniform(-math.pi, math.pi))))
    elif kind == "inline":
        task = TaskParams("inline", alpha, np.array([float(task_rng.uniform(0.45, 0.7)),
                                                     float(task_rng.uniform(-0.55, -0.35))]),
                          line_angle=float(task_rng.uniform(-math.pi / 2, math.pi / 2)))
    elif kind == "pack":
        task = TaskParams("pack", alpha, ref=(surf.xmin, surf.ymin))
    elif kind == "stack":
        base = next((o for o in placed if o.shape == "box"), placed[0] if placed else None)
        if base is None:
            raise ParameterError("stacking scenes need at least one clutter object")
        task = TaskParams("stack", alpha, stack_base=np.array([base.x, base.y, base.z + base.height]))
    else:
        raise ParameterError(f"unknown task kind {kind!r}")
    return SceneFile(name or f"scene{seed:03d}", surf, target, tuple(placed), task, notes=notes)


def benchmark_suite(n: int = 30, clutter=(4, 7), kind: str = "target", alpha: float = 10.0,
                    first_seed: int = 0) -> list[SceneFile]:
    """Seeds ``first_seed ..``; clutter counts cycle through the inclusive range."""
    lo, hi = clutter
    return [generate_scene(s, lo + (s - first_seed) % (hi - lo + 1), kind, alpha)
            for s in range(first_seed, first_seed + n)]


def adversarial_scene(seed: int) -> SceneFile:
    """A wide, flat plate to be set down inside a walled pocket.

    The plate is wider than the gripper's largest opening, so grasping it
    from the top scores worse than grasping it from the side.  Inside the
    pocket, though, the wrist of a side grasp hits the walls for every
    placement, so only a top grasp can be placed.
    """
    rng = np.random.default_rng([seed, 4241])
    width = float(rng.uniform(0.145, 0.155))
    length = float(rng.uniform(0.19, 0.21))
    thick = float(rng.uniform(0.035, 0.045))
    plate = SceneObject("plate", "box", (length, width, thick),
                        float(0.55 + rng.uniform(-0.03, 0.03)), float(0.4 + rng.uniform(-0.03, 0.03)),
                        0.0, float(rng.uniform(-0.3, 0.3)))
    cx, cy = float(0.55 + rng.uniform(-0.05, 0.05)), float(-0.4 + rng.uniform(-0.05, 0.05))
    half = 0.14
    wall_h = float(rng.uniform(0.28, 0.32))
    t = 0.03
    walls = []
    for k, (dx, dy, lx, ly) in enumerate((
            (half + t / 2, 0.0, t, 2 * half + 2 * t), (-half - t / 2, 0.0, t, 2 * half + 2 * t),
            (0.0, half + t / 2, 2 * half, t), (0.0, -half - t / 2, 2 * half, t))):
        walls.append(SceneObject(f"wall{k}", "box", (lx, ly, wall_h), cx + dx, cy + dy, 0.0, 0.0))
    surf = PlacementSurface(cx - half, cx + half, cy - half, cy + half, 0.0)
    task = TaskParams("target", 10.0, Pose2(cx, cy, float(rng.uniform(-0.2, 0.2))))
    return SceneFile(f"adversarial{seed}", surf, plate, tuple(walls), task,
                     notes={"suite": "adversarial", "seed": seed})


def adversarial_suite(n: int = 5) -> list[SceneFile]:
    return [adversarial_scene(s) for s in range(n)]
