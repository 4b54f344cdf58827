"""Joint grasp-and-place inference, the pick-then-place and sampling baselines."""

from .init import init_place_prior
from .optim import AlSettings, AlState, LbfgsSettings, augmented_lagrangian, projected_lbfgs
from .problem import (
    Configuration,
    PlacementSurface,
    Problem,
    ProblemSpec,
    Solution,
    SolverSettings,
    check_constraints,
)
from .solve import joint_solve, sampling_solve, sequential_solve

__all__ = [
    "AlSettings", "AlState", "Configuration", "LbfgsSettings", "PlacementSurface", "Problem",
    "ProblemSpec", "Solution", "SolverSettings", "augmented_lagrangian", "check_constraints",
    "init_place_prior", "joint_solve", "projected_lbfgs", "sampling_solve", "sequential_solve",
]
