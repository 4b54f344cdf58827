"""Joint grasp and placement planning over point clouds with truncated SDF collision constraints."""

__version__ = "0.1.0"
