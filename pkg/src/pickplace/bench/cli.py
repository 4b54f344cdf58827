"""Command line entry point: ``pickplace {solve,bench,demo,sdf,scene}``.

Every subcommand writes a CSV (or a grid file for ``sdf``) whose bytes depend
only on the arguments.  Wall times go to a ``.times.csv`` sidecar.  Exit
status is 0 once the work completes, whatever the per-instance outcomes,
and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..errors import FormatError, ParameterError
from ..geom import PointCloud
from ..sdf import build_scene_sdf, dump_sdf
from .harness import (METHODS, BenchConfig, demo_rows, format_csv, inline_demo_scene, result_row,
                      run_benchmark, run_sequential_task, stacking_demo_scene, write_results)
from .scenes import adversarial_suite, benchmark_suite, generate_scene, read_scene, write_scene

EXIT_OK = 0
EXIT_CONFIG = 2


def _setting(text: str):
    """``name=value`` solver override; values are parsed as int, float or bool."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    k, v = text.split("=", 1)
    low = v.strip().lower()
    if low in ("true", "false"):
        return k.strip(), low == "true"
    for kind in (int, float):
        try:
            return k.strip(), kind(v)
        except ValueError:
            pass
    raise argparse.ArgumentTypeError(f"setting {k!r} needs a numeric or boolean value")


def _common(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="solver seed (restarts, prior samples)")
    if method:
        p.add_argument("--method", choices=METHODS, default="joint")
    p.add_argument("--alpha", type=float, default=None, help="placement cost weight (scene value if omitted)")
    p.add_argument("--voxel", type=float, default=0.01, help="SDF voxel size in meters")
    p.add_argument("--eps", type=float, default=None, help="SDF truncation distance in meters")
    p.add_argument("--margin", type=float, default=0.01, help="collision margin in meters")
    p.add_argument("--samples", type=int, default=450, help="sample budget of the sampling baseline")
    p.add_argument("--set", dest="settings", type=_setting, action="append", default=[],
                   metavar="NAME=VALUE", help="solver setting override, repeatable")
    p.add_argument("-o", "--output", type=Path, default=None, help="CSV output path (stdout if omitted)")


def _config(args, scenes, methods, seeds, workers=1) -> BenchConfig:
    return BenchConfig(tuple(scenes), tuple(methods), tuple(seeds), dict(args.settings),
                       n_samples=args.samples, alpha=args.alpha, voxel=args.voxel,
                       margin=args.margin, eps_trunc=args.eps, workers=workers)


def _scene_arg(args):
    if args.scene is not None:
        return read_scene(args.scene)
    return generate_scene(args.scene_seed, args.clutter, args.kind)


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text)


def cmd_solve(args) -> int:
    scene = _scene_arg(args)
    cfg = _config(args, [scene], [args.method], [args.seed])
    results = run_benchmark(cfg)
    if args.output is not None:
        write_results(results, args.output)
    else:
        _emit(format_csv([result_row(r) for r in results], with_aggregates=False), None)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.scenes:
        scenes = [read_scene(p) for p in args.scenes]
    elif args.suite == "adversarial":
        scenes = adversarial_suite(args.n)
    else:
        scenes = benchmark_suite(args.n, (args.clutter_min, args.clutter_max), args.kind,
                                 first_seed=args.first_seed)
    seeds = range(args.seed, args.seed + args.seeds)
    cfg = _config(args, scenes, args.methods, seeds, args.workers)
    results = run_benchmark(cfg)
    if args.output is not None:
        write_results(results, args.output)
    else:
        _emit(format_csv([result_row(r) for r in results]), None)
    return EXIT_OK


def cmd_demo(args) -> int:
    make = inline_demo_scene if args.task == "inline" else stacking_demo_scene
    scene = make(args.scene_seed)
    cfg = _config(args, [scene], [args.method], [args.seed])
    res = run_sequential_task(cfg, scene, args.method, args.seed)
    rows = demo_rows(res, scene.name, args.method, args.seed)
    _emit(format_csv(rows), args.output)
    return EXIT_OK


def cmd_sdf(args) -> int:
    scene = _scene_arg(args)
    cloud = scene.place_cloud() if args.side == "place" else scene.grasp_clutter_cloud()
    if len(cloud.points) == 0:
        cloud = PointCloud(np.asarray(scene.target_cloud().points))
    s = build_scene_sdf(cloud, args.voxel, args.eps)
    band = np.abs(s.distance) < s.eps_trunc
    summary = (f"shape {' '.join(str(n) for n in s.distance.shape)}\n"
               f"spacing {s.spacing:.9g}\n"
               f"eps_trunc {s.eps_trunc:.9g}\n"
               f"origin {' '.join(format(v, '.9g') for v in s.origin)}\n"
               f"band_cells {int(band.sum())}\n"
               f"min_distance {float(s.distance.min()):.9g}\n")
    if args.output is not None:
        dump_sdf(s, args.output)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_scene(args) -> int:
    scene = generate_scene(args.scene_seed, args.clutter, args.kind)
    if args.output is None:
        from .scenes import dumps_scene

        sys.stdout.write(dumps_scene(scene))
    else:
        write_scene(scene, args.output)
    return EXIT_OK


def _scene_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, default=None, help="scene JSON file (generated if omitted)")
    p.add_argument("--scene-seed", type=int, default=0, help="generator seed when no file is given")
    p.add_argument("--clutter", type=int, default=5, help="clutter objects when generating")
    p.add_argument("--kind", choices=("target", "pack", "inline", "stack"), default="target")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pickplace", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="one scene, one method")
    _scene_options(p)
    _common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="sweep a scene suite with several methods")
    p.add_argument("scenes", nargs="*", type=Path, help="scene files (a generated suite if none)")
    p.add_argument("--suite", choices=("benchmark", "adversarial"), default="benchmark")
    p.add_argument("--n", type=int, default=30, help="suite size")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--clutter-min", type=int, default=4)
    p.add_argument("--clutter-max", type=int, default=7)
    p.add_argument("--kind", choices=("target", "pack", "inline", "stack"), default="target")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive solver seeds")
    p.add_argument("--workers", type=int, default=1)
    _common(p, method=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", help="sequential inline or stacking task")
    p.add_argument("task", choices=("inline", "stacking"))
    p.add_argument("--scene-seed", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("sdf", help="build a scene SDF, print a summary and optionally dump it")
    _scene_options(p)
    p.add_argument("--side", choices=("place", "grasp"), default="place")
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("-o", "--output", type=Path, default=None, help="binary grid output path")
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("scene", help="write a generated scene file")
    _scene_options(p)
    p.add_argument("-o", "--output", type=Path, default=None)
    p.set_defaults(func=cmd_scene)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, FormatError, OSError) as exc:
        print(f"pickplace: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
