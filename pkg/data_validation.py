#!/usr/bin/env python3
"""
Gap Flight Artifact Validation
==============================

Consistency checks for trajectory frames, controller logs and metrics records,
run before artifacts are written and when the report reads them back.
"""

from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from metrics import RUN_METRIC_NAMES
from mpc import CONTROLLER_LOG_COLUMNS
from params import GapScenario
from trajopt import FRAME_COLUMNS, Phase
from utils import setup_logging

KNOWN_STATUSES = {"Converged", "MaxIter", "HoldLast"}
RECORD_KINDS = {'run_metrics', 'trajectory_matrix'}
# required finite on a completed run; the sweep metrics may be undefined
CORE_METRICS = ('altitude_error_at_gap', 'mean_recovery_error', 'altitude_rmse', 'max_pitch')


class ArtifactValidator:
    """Error/warning/success accumulator over the project's artifact tables."""

    def __init__(self):
        self.logger = setup_logging(self.__class__.__name__)
        self.validation_results: List[Dict[str, Any]] = []
        self.enabled = True

    def reset(self) -> None:
        self.validation_results = []

    def merge(self, results: List[Dict[str, Any]]) -> None:
        """Append results gathered by another validator (e.g. in a worker process)."""
        self.validation_results.extend(results)

    def validate_trajectory_frame(self, frame: pd.DataFrame, scenario: Optional[GapScenario] = None,
                                  component: str = "trajectory") -> bool:
        """Columns, finite values, increasing time, contiguous phases, sweep inside the gap."""
        if not self.enabled:
            return True
        missing = [c for c in FRAME_COLUMNS if c not in frame.columns]
        if missing:
            self._add_error(component, f"Missing columns: {missing}")
            return False
        if frame.empty:
            self._add_error(component, "No samples")
            return False

        valid = True
        numeric = frame[FRAME_COLUMNS].to_numpy(dtype=float)
        if not np.isfinite(numeric).all():
            self._add_error(component, "Non-finite values")
            valid = False
        if (np.diff(frame['t'].to_numpy()) <= 0).any():
            self._add_error(component, "Time is not strictly increasing")
            valid = False
        phases = frame['phase'].to_numpy()
        if not set(np.unique(phases)) <= {p.value for p in Phase}:
            self._add_error(component, f"Unknown phase labels: {sorted(set(np.unique(phases)))}")
            valid = False
        elif (np.diff(phases) < 0).any():
            self._add_error(component, "Phase labels are not non-decreasing")
            valid = False
        if ((frame['x_w'] < -1e-6) | (frame['x_w'] > 1 + 1e-6)).any():
            self._add_warning(component, "Sweep state leaves [0, 1]")

        if scenario is not None:
            inside = frame['x'].map(scenario.in_threshold).to_numpy(dtype=bool)
            low = frame.loc[inside, 'x_w'] < 0.95 - 1e-6
            if low.any():
                self._add_warning(component, f"{int(low.sum())} samples inside the threshold with x_w < 0.95")

        if valid:
            self._add_success(component, f"Validated {len(frame):,} samples")
        return valid

    def validate_controller_log(self, log: pd.DataFrame, component: str = "controller_log") -> bool:
        if not self.enabled:
            return True
        missing = [c for c in CONTROLLER_LOG_COLUMNS if c not in log.columns]
        if missing:
            self._add_error(component, f"Missing columns: {missing}")
            return False
        valid = True
        if (log['k_f'] < 1).any():
            self._add_error(component, "Horizon length below 1")
            valid = False
        unknown = set(log['status']) - KNOWN_STATUSES
        if unknown:
            self._add_warning(component, f"Unknown solver statuses: {sorted(unknown)}")
        holds = int((log['status'] == "HoldLast").sum())
        if holds:
            self._add_warning(component, f"{holds} steps held the last input")
        if valid:
            self._add_success(component, f"Validated {len(log):,} controller steps")
        return valid

    def validate_metrics_record(self, record: Dict[str, Any], component: str = "metrics") -> bool:
        """A JSON record as written by the simulate and trajopt batch commands."""
        if not self.enabled:
            return True
        kind = record.get('kind')
        if kind not in RECORD_KINDS:
            self._add_error(component, f"Unknown record kind: {kind!r}")
            return False
        if 'meta' not in record:
            self._add_warning(component, "Missing metadata block")

        if kind == 'trajectory_matrix':
            entries = record.get('trajectories', [])
            failed = sum(1 for e in entries if e.get('status') != 'ok')
            if failed:
                self._add_warning(component, f"{failed}/{len(entries)} trajectories failed")
            self._add_success(component, f"Validated {len(entries)} trajectory entries")
            return True

        if record.get('status') == 'completed':
            metrics = record.get('metrics') or {}
            missing = [name for name in RUN_METRIC_NAMES if name not in metrics]
            if missing:
                self._add_error(component, f"Missing metrics: {missing}")
                return False
            bad = [name for name in CORE_METRICS
                   if metrics[name] is None or not np.isfinite(float(metrics[name]))]
            if bad:
                self._add_error(component, f"Non-finite metrics on a completed run: {bad}")
                return False
        elif record.get('status') == 'aborted':
            self._add_warning(component, f"Aborted run ({record.get('abort_reason')})")
        else:
            self._add_error(component, f"Unknown run status: {record.get('status')!r}")
            return False
        self._add_success(component, "Validated run record")
        return True

    def _add_error(self, component: str, message: str) -> None:
        self.validation_results.append({'level': 'ERROR', 'component': component, 'message': message})
        self.logger.error(f"❌ {component}: {message}")

    def _add_warning(self, component: str, message: str) -> None:
        self.validation_results.append({'level': 'WARNING', 'component': component, 'message': message})
        self.logger.warning(f"⚠️  {component}: {message}")

    def _add_success(self, component: str, message: str) -> None:
        self.validation_results.append({'level': 'SUCCESS', 'component': component, 'message': message})
        self.logger.debug(f"✅ {component}: {message}")

    def get_validation_summary(self) -> Dict[str, Any]:
        levels = [r['level'] for r in self.validation_results]
        return {
            'total_checks': len(levels),
            'errors': levels.count('ERROR'),
            'warnings': levels.count('WARNING'),
            'successes': levels.count('SUCCESS'),
            'is_valid': 'ERROR' not in levels,
            'details': self.validation_results,
        }

    def print_validation_summary(self) -> None:
        summary = self.get_validation_summary()
        self.logger.info("=" * 60)
        self.logger.info("📊 VALIDATION SUMMARY")
        self.logger.info("=" * 60)
        self.logger.info(f"✅ Successes: {summary['successes']}")
        self.logger.info(f"⚠️  Warnings: {summary['warnings']}")
        self.logger.info(f"❌ Errors: {summary['errors']}")
        self.logger.info(f"🎯 Overall Status: {'VALID' if summary['is_valid'] else 'INVALID'}")
        for level, title in (('ERROR', "❌ ERRORS:"), ('WARNING', "⚠️  WARNINGS:")):
            entries = [r for r in self.validation_results if r['level'] == level]
            if entries:
                self.logger.info(title)
                for r in entries:
                    self.logger.info(f"  • {r['component']}: {r['message']}")


# Global validator instance
artifact_validator = ArtifactValidator()
