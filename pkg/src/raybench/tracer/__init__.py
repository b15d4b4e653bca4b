"""Propagation path computation."""
from .diffraction import diffraction_paths, fermat_points
from .directions import fibonacci_directions, grid_directions
from .engine import merge_paths, trace
from .image import UnsupportedDepthError, correct_path, trace_image_method
from .paths import Interaction, PropagationPath, TraceParams, TraceStats
from .sbr import launch_sbr
from .scatter import scatter_paths

__all__ = [
    "Interaction", "PropagationPath", "TraceParams", "TraceStats", "UnsupportedDepthError",
    "correct_path", "diffraction_paths", "fermat_points", "fibonacci_directions", "grid_directions",
    "launch_sbr", "merge_paths", "scatter_paths", "trace", "trace_image_method",
]
