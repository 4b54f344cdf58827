"""Benchmark orchestration, CSV output and sequential placement demos."""

from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..costs import PlacePose, TaskParams, cost_stack, line_deviation
from ..errors import ParameterError, PickPlaceError
from ..geom import PointCloud, Pose3
from ..planner.init import cube_rotations
from ..planner.optim import AlSettings
from ..planner.problem import Problem, ProblemSpec, Solution, SolverSettings
from ..planner.solve import joint_solve, sampling_solve, sequential_solve
from ..sdf import build_scene_sdf, update_sdf
from .evaluate import EvalReport, evaluate
from .scenes import PLACE_TABLE, SceneFile, SceneObject

METHODS = ("joint", "sequential", "sampling")

COLUMNS = (
    "scene", "method", "seed", "status", "reason", "grasp_success", "place_success", "success",
    "likelihood", "objective", "grasp_score", "place_cost", "fk_grasp", "fk_place",
    "collision_place", "collision_grasp", "footprint_outside", "outer_iterations",
    "inner_iterations", "evaluations", "restart", "eval_reason",
)
TIME_COLUMNS = ("scene", "method", "seed", "wall_time")


@dataclass(frozen=True)
class BenchConfig:
    """What to run.  ``settings`` overrides solver defaults by field name
    (``al_max_outer`` etc. reach into the augmented Lagrangian settings)."""

    scenes: tuple
    methods: tuple = METHODS
    seeds: tuple = (0,)
    settings: dict = field(default_factory=dict)
    n_samples: int = 450
    alpha: float | None = None
    voxel: float = 0.01
    margin: float = 0.01
    eps_trunc: float | None = None
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        if len(self.scenes) < 1:
            raise ParameterError("a benchmark needs at least one scene")
        if len(self.seeds) < 1:
            raise ParameterError("a benchmark needs at least one seed")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ParameterError(f"unknown methods {bad}; choose from {METHODS}")
        if self.n_samples < 1 or self.voxel <= 0 or self.margin < 0 or self.workers < 1:
            raise ParameterError("samples, voxel size and workers must be positive, margin >= 0")
        make_settings(self.settings)  # unknown names are a configuration error, not an instance failure

    def solver_settings(self) -> SolverSettings:
        return make_settings(self.settings)


def make_settings(overrides: dict) -> SolverSettings:
    st = SolverSettings()
    al_names = {f.name for f in fields(AlSettings)}
    top, al = {}, {}
    for k, v in overrides.items():
        if k.startswith("al_") and k[3:] in al_names:
            al[k[3:]] = v
        elif k in {f.name for f in fields(SolverSettings)} and k != "al":
            top[k] = v
        else:
            raise ParameterError(f"unknown solver setting {k!r}")
    if al:
        top["al"] = replace(st.al, **al)
    return replace(st, **top)


@dataclass
class InstanceResult:
    scene: str
    method: str
    seed: int
    solution: Solution | None
    report: EvalReport
    error: str = ""


def _spec(scene: SceneFile, cfg: BenchConfig) -> ProblemSpec:
    return scene.problem(cfg.solver_settings(), margin=cfg.margin, spacing=cfg.voxel,
                         alpha=cfg.alpha, eps_trunc=cfg.eps_trunc)


def run_instance(scene: SceneFile, cfg: BenchConfig, seed: int) -> list[InstanceResult]:
    """All requested methods on one (scene, seed).

    When both run, the pick-then-place solution is handed to the joint
    solver as one of its initializations, so it is computed only once.
    """
    out: dict[str, InstanceResult] = {}
    try:
        spec = _spec(scene, cfg)
        pb = Problem(spec)
    except PickPlaceError as exc:
        rep = EvalReport(False, False, 0.0, "solver_infeasible")
        return [InstanceResult(scene.name, m, seed, None, rep, type(exc).__name__) for m in cfg.methods]
    order = sorted(cfg.methods, key=lambda m: ("sequential", "joint", "sampling").index(m))
    seq = None
    for m in order:
        try:
            if m == "sequential":
                sol = seq = sequential_solve(spec, seed, problem=pb)
            elif m == "joint":
                sol = joint_solve(spec, seed, warm_starts=() if seq is None else (seq,), problem=pb)
            else:
                sol = sampling_solve(spec, cfg.n_samples, seed, problem=pb)
            out[m] = InstanceResult(scene.name, m, seed, sol, evaluate(sol, scene, pb))
        except PickPlaceError as exc:
            rep = EvalReport(False, False, 0.0, "solver_infeasible")
            out[m] = InstanceResult(scene.name, m, seed, None, rep, type(exc).__name__)
    return [out[m] for m in cfg.methods]


def _run_job(args):
    scene, cfg, seed = args
    return run_instance(scene, cfg, seed)


def run_benchmark(cfg: BenchConfig) -> list[InstanceResult]:
    """Every (scene, seed) with every method; failures are recorded, never raised.

    With ``workers > 1`` instances run in separate processes; results are
    always assembled in (scene, seed, method) order.
    """
    jobs = [(sc, cfg, s) for sc in cfg.scenes for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            nested = list(ex.map(_run_job, jobs))
    else:
        nested = [_run_job(j) for j in jobs]
    results = [r for group in nested for r in group]
    if cfg.output:
        write_results(results, cfg.output)
    return results


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".9g")


def result_row(r: InstanceResult) -> dict:
    s, rep = r.solution, r.report
    res = s.residuals if s is not None else {}
    return {
        "scene": r.scene, "method": r.method, "seed": r.seed,
        "status": s.status if s is not None else "error",
        "reason": (s.reason if s is not None else r.error) or "",
        "grasp_success": rep.grasp_success, "place_success": rep.place_success,
        "success": rep.success, "likelihood": rep.likelihood,
        "objective": s.objective if s is not None else math.inf,
        "grasp_score": s.grasp_score if s is not None else 0.0,
        "place_cost": s.place_cost if s is not None else math.nan,
        "fk_grasp": res.get("fk_grasp"), "fk_place": res.get("fk_place"),
        "collision_place": res.get("collision_place_union"),
        "collision_grasp": res.get("collision_grasp_robot"),
        "footprint_outside": res.get("footprint_outside"),
        "outer_iterations": s.outer_iterations if s is not None else 0,
        "inner_iterations": s.inner_iterations if s is not None else 0,
        "evaluations": s.evaluations if s is not None else 0,
        "restart": s.restart if s is not None else -1,
        "eval_reason": rep.reason,
    }


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Per-method footer: success rates and mean likelihood/evaluations (derived from the rows)."""
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for m in methods:
        sub = [r for r in rows if r["method"] == m]
        n = len(sub)
        out.append({
            "scene": "ALL", "method": m, "seed": n, "status": "aggregate", "reason": "",
            "grasp_success": sum(bool(r["grasp_success"]) for r in sub) / n,
            "place_success": sum(bool(r["place_success"]) for r in sub) / n,
            "success": sum(bool(r["success"]) for r in sub) / n,
            "likelihood": sum(r["likelihood"] for r in sub) / n,
            "objective": None, "grasp_score": sum(r["grasp_score"] for r in sub) / n,
            "place_cost": None, "fk_grasp": None, "fk_place": None, "collision_place": None,
            "collision_grasp": None, "footprint_outside": None,
            "outer_iterations": sum(r["outer_iterations"] for r in sub) / n,
            "inner_iterations": sum(r["inner_iterations"] for r in sub) / n,
            "evaluations": sum(r["evaluations"] for r in sub) / n,
            "restart": None, "eval_reason": "",
        })
    return out


def format_csv(rows: list[dict], with_aggregates: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    body = list(rows) + (aggregate_rows(rows) if with_aggregates and rows else [])
    for r in body:
        w.writerow([r[c] if isinstance(r[c], str) else _num(r[c]) for c in COLUMNS])
    return buf.getvalue()


def timing_csv(results: list[InstanceResult]) -> str:
    """Wall times, kept apart from the main CSV so that it stays byte-reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIME_COLUMNS)
    per: dict[str, list[float]] = {}
    for r in results:
        t = r.solution.wall_time if r.solution is not None else 0.0
        per.setdefault(r.method, []).append(t)
        w.writerow([r.scene, r.method, r.seed, format(t, ".4f")])
    for m, ts in per.items():
        sd = statistics.stdev(ts) if len(ts) > 1 else 0.0
        w.writerow(["MEAN", m, len(ts), format(statistics.fmean(ts), ".4f")])
        w.writerow(["STD", m, len(ts), format(sd, ".4f")])
    return buf.getvalue()


def write_results(results: list[InstanceResult], path) -> None:
    path = Path(path)
    rows = [result_row(r) for r in results]
    path.write_text(format_csv(rows))
    path.with_name(path.name + ".times.csv").write_text(timing_csv(results))


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# sequential placement tasks
# ---------------------------------------------------------------------------

@dataclass
class SequentialStep:
    name: str
    solution: Solution | None
    report: EvalReport
    line_deviation: float = math.nan
    stack_cost: float = math.nan
    identity_cost: float = math.nan
    best_axis_cost: float = math.nan


@dataclass
class SequentialResult:
    steps: list
    place_cloud: PointCloud
    sdf: object
    placed: list


def run_sequential_task(cfg: BenchConfig, scene: SceneFile, method: str = "joint",
                        seed: int = 0) -> SequentialResult:
    """Place the grasp target and then every queued object, one at a time.

    After each accepted placement the object's observed points join the
    place-scene cloud and the place SDF is updated in place with
    ``update_sdf``.  Objects still waiting on the grasp table act as grasp
    clutter.  For stacking the tether point moves to the top of the object
    just placed.  A failed placement is recorded and the next object is
    still attempted.
    """
    objs = [scene.target] + list(scene.queue)
    if len(objs) < 2:
        raise ParameterError("a sequential task needs at least two objects")
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}")
    settings = cfg.solver_settings()
    place_pts = scene.place_cloud().points
    sdf = build_scene_sdf(PointCloud(place_pts), cfg.voxel, cfg.eps_trunc) if len(place_pts) else None
    task = scene.task if cfg.alpha is None else replace(scene.task, alpha=cfg.alpha)
    steps, placed = [], []
    for k, obj in enumerate(objs):
        waiting = objs[k + 1:]
        sub = replace(scene, target=obj, grasp_clutter=tuple(scene.grasp_clutter) + tuple(waiting),
                      objects=tuple(scene.objects) + tuple(placed), task=task)
        spec = ProblemSpec(sub.target_cloud(), PointCloud(place_pts), scene.surface, task,
                           grasp_table_z=scene.grasp_surface_z, grasp_clutter=sub.grasp_clutter_cloud(),
                           sdf_spacing=cfg.voxel, eps_trunc=cfg.eps_trunc, margin=cfg.margin,
                           settings=settings)
        try:
            pb = Problem(spec, place_sdf=sdf)
            if method == "joint":
                sol = joint_solve(spec, seed, problem=pb)
            elif method == "sequential":
                sol = sequential_solve(spec, seed, problem=pb)
            else:
                sol = sampling_solve(spec, cfg.n_samples, seed, problem=pb)
            rep = evaluate(sol, sub, pb, placed_before=placed)
        except PickPlaceError as exc:
            steps.append(SequentialStep(obj.name, None, EvalReport(False, False, 0.0, type(exc).__name__)))
            continue
        step = SequentialStep(obj.name, sol, rep)
        if sol.feasible:
            t = sol.place_pose.translation
            if task.kind == "inline":
                step.line_deviation = line_deviation(t[:2], task.target, task.line_angle)
            if task.kind == "stack":
                ext = pb.extents
                step.stack_cost = cost_stack(sol.place, ext, task.stack_base, 0.0)[0]
                step.identity_cost = cost_stack(PlacePose(Pose3(t)), ext, task.stack_base, 0.0)[0]
                step.best_axis_cost = min(
                    cost_stack(PlacePose(Pose3.from_rt(R, t)), ext, task.stack_base, 0.0)[0]
                    for R in cube_rotations())
        steps.append(step)
        if rep.success:
            local = pb.object_local
            sdf = update_sdf(sdf, local, sol.place_pose) if sdf is not None else \
                build_scene_sdf(PointCloud(sol.place_pose.apply(local.points)), cfg.voxel, cfg.eps_trunc)
            place_pts = np.vstack([place_pts, sol.place_pose.apply(local.points)])
            placed.append(rep.placed)
            if task.kind == "stack":
                top = float(sol.place_pose.apply(local.points)[:, 2].max())
                task = replace(task, stack_base=np.array([t[0], t[1], top]))
    return SequentialResult(steps, PointCloud(place_pts), sdf, placed)


def inline_demo_scene(seed: int = 0, alpha: float = 1000.0) -> SceneFile:
    """Four cylinders on the grasp table to be set down along a line on an empty table."""
    rng = np.random.default_rng([seed, 31])
    cyl = []
    for k, (x, y) in enumerate(((0.45, 0.28), (0.65, 0.28), (0.45, 0.52), (0.65, 0.52))):
        cyl.append(SceneObject(f"cylinder{k}", "cylinder",
                               (float(rng.uniform(0.025, 0.032)), float(rng.uniform(0.08, 0.12))), x, y))
    task = TaskParams("inline", alpha, np.array([0.6, -0.45]), line_angle=float(rng.uniform(-0.6, 0.6)))
    return SceneFile(f"inline{seed}", PLACE_TABLE, cyl[0], (), task, queue=tuple(cyl[1:]),
                     notes={"demo": "inline", "seed": seed})


def stacking_demo_scene(seed: int = 0, alpha: float = 10.0) -> SceneFile:
    """Three upright blocks stacked onto a wide base box; lying them flat keeps the stack low."""
    rng = np.random.default_rng([seed, 37])
    blocks = []
    for k, (x, y) in enumerate(((0.45, 0.3), (0.65, 0.3), (0.55, 0.5))):
        size = (float(rng.uniform(0.07, 0.09)), float(rng.uniform(0.05, 0.06)),
                float(rng.uniform(0.11, 0.13)))
        blocks.append(SceneObject(f"block{k}", "box", size, x, y, 0.0, float(rng.uniform(-0.3, 0.3))))
    base = SceneObject("base", "box", (0.16, 0.16, 0.06), 0.6, -0.4, 0.0, 0.0)
    task = TaskParams("stack", alpha, stack_base=np.array([base.x, base.y, base.height]))
    return SceneFile(f"stacking{seed}", PLACE_TABLE, blocks[0], (base,), task, queue=tuple(blocks[1:]),
                     notes={"demo": "stacking", "seed": seed})


def demo_rows(res: SequentialResult, scene_name: str, method: str, seed: int) -> list[dict]:
    rows = []
    for s in res.steps:
        r = result_row(InstanceResult(f"{scene_name}/{s.name}", method, seed, s.solution, s.report,
                                      "" if s.solution is not None else s.report.reason))
        rows.append(r)
    return rows
