#!/usr/bin/env python3
"""
Gap Flight Errors
=================

Exception hierarchy shared by every module. Each error carries the process exit
code the CLI reports for it.
"""

from typing import Any, Dict


class GapFlightError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': self.__class__.__name__,
            'message': str(self),
            'exit_code': self.exit_code,
        }


# ==============================================================================
# --- Configuration Errors (exit 2) ---
# ==============================================================================

class ConfigError(GapFlightError):
    exit_code = 2


class ParseError(ConfigError):
    """Config file could not be parsed."""


class ValidationError(ConfigError):
    """A parameter violates an invariant. ``field`` names the offender."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class DegenerateGeometry(ConfigError):
    pass


class DomainError(ConfigError):
    """Argument outside the domain of an operation."""


class ScenarioError(ValidationError):
    pass


# ==============================================================================
# --- Solver Errors (exit 3) ---
# ==============================================================================

class SolverError(GapFlightError):
    exit_code = 3


class SolveFailed(SolverError):
    def __init__(self, message: str, status: str = "Failed"):
        self.status = status
        super().__init__(message)


class DefectTooLarge(SolverError):
    pass


class NoTrimFound(SolverError):
    pass


class QpInfeasible(SolverError):
    pass


class NumericalBreakdown(SolverError):
    pass


# ==============================================================================
# --- Run Errors (exit 4) ---
# ==============================================================================

class RunError(GapFlightError):
    exit_code = 4


class StallDomainError(RunError):
    pass


class EndOfTrajectory(RunError):
    pass


class IncompleteRun(RunError):
    pass


class RunAborted(RunError):
    """Closed-loop run stopped early. Partial logs ride along for diagnostics."""

    def __init__(self, reason: str, message: str, trajectory_log=None, controller_log=None):
        self.reason = reason
        self.trajectory_log = trajectory_log
        self.controller_log = controller_log
        super().__init__(f"{reason}: {message}")


# ==============================================================================
# --- Data / I/O Errors (exit 5) ---
# ==============================================================================

class DataError(GapFlightError):
    exit_code = 5


class NoData(DataError):
    pass


class TooFewSamples(DataError):
    pass


class ArtifactError(DataError):
    pass


# ==============================================================================
# --- Warnings ---
# ==============================================================================

class InsufficientHistory(UserWarning):
    """Input history does not cover the delay window; last known input is held."""
