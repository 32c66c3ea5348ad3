#!/usr/bin/env python3
"""
Gap Flight Run Configuration
============================

Centralized run-level settings: output layout, trajectory-optimization mesh and
tolerances, experiment grid and worker counts. Physical constants of the drone
live in ``params.py``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

# ==============================================================================
# --- Base Configuration ---
# ==============================================================================

@dataclass
class TrajoptConfig:
    """Multi-phase transcription settings."""
    nodes_per_phase: Tuple[int, int, int, int] = (20, 13, 20, 8)
    recovery_length: float = 1.5
    steady_length: float = 0.5
    gap_center_z: float = 0.0
    min_phase_duration: float = 1e-3
    max_phase_duration: float = 10.0
    gap_sweep_min: float = 0.95
    case3_regularizer: float = 1e-4
    input_regularizer: float = 1e-3
    strict_gap_altitude: bool = False      # z = z_gap at every Phase-2 node
    max_gap_pitch: Optional[float] = None  # rad, tail-strike guard over Phase 2
    defect_tolerance: float = 1e-4
    defect_check_factor: int = 10
    max_refinements: int = 2
    max_iterations: int = 200


@dataclass
class ExperimentConfig:
    """Scenario grids for the batch commands."""
    speeds: Tuple[float, ...] = (5.0, 6.0, 7.0)
    gap_positions: Tuple[float, ...] = (4.0, 5.0, 6.0)
    thresholds: Tuple[float, ...] = (0.4, 0.8, 1.2)
    cases: Tuple[int, ...] = (1, 2, 3)
    # closed-loop suite: fixed gap position, all thresholds for Case 1 and the
    # case comparison at one threshold
    closed_loop_gap_x: float = 4.0
    case_comparison_threshold: float = 0.4
    repeats: int = 3


@dataclass
class AnalysisConfig:
    """Statistics settings for the report."""
    significance_level: float = 0.01
    min_samples_for_test: int = 3
    # Case 3 must beat Case 1 median gap-speed gain by this much [m/s]
    speed_gain_margin: float = 0.5


@dataclass
class FilePaths:
    """Centralized output layout: out/{trajectories,runs,reports}."""
    out_dir: Path

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)

    @property
    def trajectories_dir(self) -> Path:
        return self.out_dir / "trajectories"

    @property
    def runs_dir(self) -> Path:
        return self.out_dir / "runs"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"

    def ensure(self) -> None:
        for path in (self.trajectories_dir, self.runs_dir, self.reports_dir):
            path.mkdir(parents=True, exist_ok=True)


class Config:
    """Main configuration class that brings together all configuration components."""

    def __init__(self, out_dir: Optional[str] = None):
        self.paths = FilePaths(out_dir=Path(out_dir) if out_dir else Path("out"))
        self.trajopt = TrajoptConfig()
        self.experiment = ExperimentConfig()
        self.analysis = AnalysisConfig()

# Global configuration instance
config = Config()
