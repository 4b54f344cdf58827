"""Scenes, evaluation proxies, benchmark sweeps and the command-line entry point."""

from .evaluate import EvalReport, evaluate
from .harness import BenchConfig, run_benchmark, run_sequential_task
from .scenes import SceneFile, SceneObject, adversarial_suite, benchmark_suite, generate_scene, read_scene, write_scene

__all__ = [
    "BenchConfig", "EvalReport", "SceneFile", "SceneObject", "adversarial_suite", "benchmark_suite",
    "evaluate", "generate_scene", "read_scene", "run_benchmark", "run_sequential_task", "write_scene",
]
