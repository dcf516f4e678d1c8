"""Monocular event-camera visual odometry with probabilistic depth filtering."""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, PoseSE3, se3_exp, se3_log
from .io import Config, Event, load_config
from .pipeline import Pipeline, run_on_events, run_on_tracks
from .synth import SceneSpec, generate_scene

__all__ = [
    "CameraIntrinsics",
    "Config",
    "Event",
    "Pipeline",
    "PoseSE3",
    "SceneSpec",
    "generate_scene",
    "load_config",
    "run_on_events",
    "run_on_tracks",
    "se3_exp",
    "se3_log",
    "__version__",
]
