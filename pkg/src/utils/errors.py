"""
Error Types — Failure Taxonomy for Experiments.

Every failure the artifact can report maps to one of these classes, and
each class carries the process exit code the CLI uses for it:

  DataValidationError   → 1  malformed dataset rows or infeasible split
  ConfigError           → 1  bad key, bad value, missing path in a config file
  SimulationError       → 1  Cholesky failure, censoring bisection cannot bracket
  TrainingDivergedError → 2  non-finite objective or gradient during fit
  BoundViolationError   → 3  a theory check found LHS > RHS beyond tolerance

Pipeline stages never let these escape into the engine: the stage wrapper
converts them into FAILED step results and records the class name, so the
CLI can still pick the right exit code from the trace.
"""
from __future__ import annotations

from typing import Any, Optional


class SurvCausError(Exception):
    """Base class for every error raised on purpose by this package."""
    exit_code: int = 1


class DataValidationError(SurvCausError, ValueError):
    """A dataset (or a requested split of it) violates its invariants."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(SurvCausError, ValueError):
    """A config file contains an unknown key or an invalid value."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message)


class SimulationError(SurvCausError, RuntimeError):
    """Synthetic data generation could not complete."""


class TrainingDivergedError(SurvCausError, RuntimeError):
    """
    The training objective (or its gradient) became non-finite.

    `state` holds the last finite parameter snapshot and `report` the
    TrainReport up to the failing epoch, so callers can still checkpoint.
    """
    exit_code = 2

    def __init__(self, message: str, state: Optional[dict] = None, report: Any = None):
        super().__init__(message)
        self.state = state
        self.report = report


class BoundViolationError(SurvCausError, AssertionError):
    """A numerical bound check failed beyond its tolerance."""
    exit_code = 3


class SinkhornConvergenceWarning(RuntimeWarning):
    """Sinkhorn stopped at max_iter with a marginal violation above 10·tol."""


def exit_code_for(error: BaseException) -> int:
    """Map any exception to the CLI exit code (unknown errors count as runtime failures)."""
    if isinstance(error, SurvCausError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, PermissionError)):
        return 1
    return 2
