"""BV-regularized optimal control of the wave equation."""
from __future__ import annotations

from .control_ops import MeasureControl, StepFunction, apply_B, apply_B_star, compute_p1
from .errors import BvWaveError
from .mesh_fem import build_uniform_mesh
from .pdap import run_pdap
from .wave_solver import SchemeParams, TimeGrid, WaveSolver

__all__ = [
    "BvWaveError",
    "MeasureControl",
    "SchemeParams",
    "StepFunction",
    "TimeGrid",
    "WaveSolver",
    "apply_B",
    "apply_B_star",
    "build_uniform_mesh",
    "compute_p1",
    "run_pdap",
]
