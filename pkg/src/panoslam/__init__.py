"""Equirectangular panoramic visual SLAM with sparse-to-dense range completion."""

from .camera import Intrinsics, bearing_from_pixel, make_intrinsics, project, unproject
from .config import Settings, build_settings
from .geometry import Pose
from .system import RunResult, Slam, load_sequence, run_sequence

__version__ = "0.1.0"

__all__ = [
    "Intrinsics",
    "Pose",
    "RunResult",
    "Settings",
    "Slam",
    "bearing_from_pixel",
    "build_settings",
    "load_sequence",
    "make_intrinsics",
    "project",
    "run_sequence",
    "unproject",
]
