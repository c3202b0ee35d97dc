"""Exception hierarchy shared by the solver, the optimizer and the CLI."""
from __future__ import annotations

from typing import Sequence


class BvWaveError(Exception):
    """Base class for every error raised on purpose by the package."""

    exit_code: int = 5


class ConfigurationError(BvWaveError, ValueError):
    """Invalid run configuration, mesh level or problem setup."""

    exit_code = 2


class StabilityGateError(BvWaveError):
    """The time step/mesh pair violates the stability conditions of the scheme."""

    exit_code = 3

    def __init__(self, failed: Sequence[int], report: object | None = None) -> None:
        self.failed = tuple(failed)
        self.report = report
        names = ", ".join(str(index) for index in self.failed)
        super().__init__(f"Stability gate failed: inequality {names} violated")


class NonConvergenceError(BvWaveError):
    """An iterative method stopped before reaching its tolerance."""

    exit_code = 4


class NumericalError(BvWaveError, RuntimeError):
    """Internal numerical failure (singular system, non-finite values)."""

    exit_code = 5


class GridMismatchError(NumericalError):
    """Two discretizations are not nested or do not share a time horizon."""


class ControlError(BvWaveError, ValueError):
    """A measure control with atoms outside (0, T) or unsorted atom times."""

    exit_code = 2


__all__ = [
    "BvWaveError",
    "ConfigurationError",
    "ControlError",
    "GridMismatchError",
    "NonConvergenceError",
    "NumericalError",
    "StabilityGateError",
]
