#!/usr/bin/env python3
"""
Gap Flight Batch Pipelines
==========================

Batch drivers behind the CLI:
1. Trajectory matrix: solve every scenario of a grid and write one CSV each
   plus a summary JSON
2. Experiment matrix: per scenario solve the reference, then fly repeated
   closed-loop runs and write trajectory/controller logs and metrics records
3. Report: aggregate metrics records into summary statistics

Per-item failures are recorded in the outputs and the batch continues.
Independent items are distributed over a process pool; results keep grid order.
Workers validate into their own ArtifactValidator and return the results, which
the parent merges into the global validator.
"""

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config, config
from data_validation import ArtifactValidator, artifact_validator
from errors import ArtifactError, GapFlightError, RunAborted
from metrics import build_report, load_records, long_format
from params import DroneParams, GapScenario, params_to_dict
from performance_monitoring import RUNS, SOLVES, BatchMetrics, performance_monitor
from sim import RunConfig, SensorNoise, run_closed_loop
from trajopt import PhasedTrajectory, resample_trajectory, solve_gap_trajectory, trajectory_summary
from utils import (ProgressTracker, artifact_metadata, content_hash, read_csv_artifact,
                   read_csv_metadata, safe_file_write, setup_logging)

logger = setup_logging(__name__)


# ==============================================================================
# --- Scenario Grids ---
# ==============================================================================

def scenario_stem(scenario: GapScenario) -> str:
    return (f"c{scenario.objective.value}_v{scenario.initial_speed:g}"
            f"_x{scenario.gap_x:g}_t{scenario.gap_threshold:g}")


def trajectory_grid(cases: Sequence[int], cfg: Config = config) -> List[GapScenario]:
    """Full factorial grid: cases × speeds × gap positions × thresholds."""
    exp, tr = cfg.experiment, cfg.trajopt
    return [GapScenario(gap_x=gap_x, gap_threshold=thr, initial_speed=speed, objective=case,
                        gap_center_z=tr.gap_center_z, recovery_length=tr.recovery_length,
                        steady_length=tr.steady_length)
            for case, speed, gap_x, thr in itertools.product(cases, exp.speeds, exp.gap_positions, exp.thresholds)]


def experiment_grid(cfg: Config = config) -> List[GapScenario]:
    """Closed-loop suite: Case 1 over speeds × thresholds, plus the case
    comparison at one threshold."""
    exp, tr = cfg.experiment, cfg.trajopt
    keys = [(1, speed, thr) for speed, thr in itertools.product(exp.speeds, exp.thresholds)]
    keys += [(case, speed, exp.case_comparison_threshold)
             for case in exp.cases if case != 1 for speed in exp.speeds]
    return [GapScenario(gap_x=exp.closed_loop_gap_x, gap_threshold=thr, initial_speed=speed, objective=case,
                        gap_center_z=tr.gap_center_z, recovery_length=tr.recovery_length,
                        steady_length=tr.steady_length)
            for case, speed, thr in keys]


def config_hash(params: DroneParams, *extra: Any) -> str:
    return content_hash(params_to_dict(params), *extra)


def run_seed(base_seed: int, scenario: GapScenario, repeat: int) -> int:
    """Per-run seed, independent of grid order and worker assignment."""
    key = [base_seed, repeat, *[int(v) for v in np.frombuffer(scenario_stem(scenario).encode(), dtype=np.uint8)]]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# ==============================================================================
# --- Trajectory Artifacts ---
# ==============================================================================

def write_trajectory(traj: PhasedTrajectory, directory: Path, params: DroneParams,
                     settings_dict: Dict[str, Any], path: Optional[Path] = None) -> Path:
    """Write the collocation solution as CSV with scenario and phase times in the header.

    ``path`` overrides the content-hashed default name.
    """
    scenario = traj.scenario
    digest = config_hash(params, settings_dict, scenario.to_dict())
    meta = artifact_metadata(digest, scenario=scenario.to_dict(), phase_times=traj.phase_times,
                             objective=traj.objective,
                             **{k: v for k, v in traj.meta.items() if k != 'solve_seconds'})
    path = Path(path) if path else Path(directory) / f"traj_{scenario_stem(scenario)}-{digest}.csv"
    return safe_file_write(traj.to_frame(), path, metadata=meta)


def read_trajectory(path: Path, params: DroneParams) -> PhasedTrajectory:
    """Load a trajectory CSV written by ``write_trajectory``."""
    meta = read_csv_metadata(path)
    if 'scenario' not in meta:
        raise ArtifactError(f"{path} carries no scenario metadata")
    scenario = GapScenario(**meta['scenario'])
    objective = meta.get('objective')
    traj = PhasedTrajectory.from_frame(read_csv_artifact(path), scenario, params=params,
                                       phase_times=meta.get('phase_times'),
                                       objective=float('nan') if objective is None else objective)
    traj.meta = {k: meta[k] for k in ('nodes_per_phase', 'max_defect') if k in meta}
    return traj


def worker_validator(enabled: bool) -> ArtifactValidator:
    validator = ArtifactValidator()
    validator.enabled = enabled and artifact_validator.enabled
    return validator


def _solve_and_write(task: Tuple[GapScenario, DroneParams, Any, Path, bool]
                     ) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Worker: one trajectory solve. Failures become ``status: failed`` entries.

    Returns the entry and the validation results of the written trajectory.
    """
    scenario, params, settings, directory, enable_validation = task
    validator = worker_validator(enable_validation)
    entry: Dict[str, Any] = {'scenario': scenario.to_dict()}
    try:
        traj = solve_gap_trajectory(scenario, params, settings)
        validator.validate_trajectory_frame(traj.to_frame(), scenario, component=f"traj_{scenario_stem(scenario)}")
        path = write_trajectory(traj, directory, params, asdict(settings))
        entry.update(status='ok', summary=trajectory_summary(traj), file=path.name,
                     iterations=traj.meta['iterations'], refinements=traj.meta['refinements'])
    except GapFlightError as e:
        entry.update(status='failed', error=e.to_dict())
    return entry, validator.validation_results


def _map(func: Callable, tasks: List[Any], jobs: int, tracker: ProgressTracker) -> List[Any]:
    """Ordered map over a process pool (serial when ``jobs == 1``)."""
    results = []
    if jobs <= 1:
        for task in tasks:
            results.append(func(task))
            tracker.update()
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for result in pool.map(func, tasks):
            results.append(result)
            tracker.update()
    return results


# ==============================================================================
# --- Trajectory Matrix ---
# ==============================================================================

class TrajectoryMatrixRunner:
    """Solves a scenario grid and writes trajectories plus a summary record."""

    def __init__(self, params: DroneParams, cfg: Config = config, jobs: int = 1,
                 enable_monitoring: bool = True, enable_validation: bool = True):
        self.logger = setup_logging(self.__class__.__name__)
        self.params = params
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.enable_monitoring = enable_monitoring
        self.enable_validation = enable_validation

    def run(self, scenarios: Sequence[GapScenario], stem: str = "trajectory_matrix") -> Path:
        with performance_monitor.monitor_operation(f"Trajectory matrix ({len(scenarios)} scenarios)", SOLVES,
                                                   planned=len(scenarios), enabled=self.enable_monitoring) as perf:
            return self._run_impl(scenarios, stem, perf)

    def _run_impl(self, scenarios: Sequence[GapScenario], stem: str, perf: BatchMetrics) -> Path:
        directory = self.cfg.paths.trajectories_dir
        settings = self.cfg.trajopt
        self.logger.info(f"🚀 Solving {len(scenarios)} trajectories with {self.jobs} worker(s)")
        tracker = ProgressTracker(len(scenarios), "Trajectories", self.logger)
        tasks = [(s, self.params, settings, directory, self.enable_validation) for s in scenarios]
        entries = []
        for entry, results in _map(_solve_and_write, tasks, self.jobs, tracker):
            entries.append(entry)
            perf.record_solve(entry)
            artifact_validator.merge(results)

        failed = [e for e in entries if e['status'] != 'ok']
        for entry in failed:
            self.logger.error(f"❌ {scenario_stem(GapScenario(**entry['scenario']))}: {entry['error']['message']}")
        self.logger.info(f"📊 Trajectory matrix: {len(entries) - len(failed)}/{len(entries)} solved")

        digest = config_hash(self.params, asdict(settings), [s.to_dict() for s in scenarios])
        record = {'kind': 'trajectory_matrix', 'trajectories': entries}
        meta = artifact_metadata(digest, scenarios=len(scenarios))
        if self.enable_validation:
            artifact_validator.validate_metrics_record({'meta': meta, **record}, component=stem)
        return safe_file_write(record, directory / f"{stem}-{digest}.json", metadata=meta)


# ==============================================================================
# --- Closed-Loop Runs ---
# ==============================================================================

@dataclass
class RunSettings:
    """Closed-loop settings shared by every run of a batch (per-run seed aside)."""
    noise_scale: float = 1.0
    latency: float = 0.065
    compensate_delay: bool = True
    mismatch_range: float = 0.0
    launch_speed_std: float = 0.0
    repeats: int = 3
    seed: int = 0
    overrides: Dict[str, Any] = field(default_factory=dict)

    def run_config(self, scenario: GapScenario, seed: int) -> RunConfig:
        default = SensorNoise()
        noise = SensorNoise(position=default.position * self.noise_scale,
                            attitude=default.attitude * self.noise_scale)
        return RunConfig(scenario=scenario, noise=noise, latency=self.latency,
                         compensate_delay=self.compensate_delay, mismatch_range=self.mismatch_range,
                         launch_speed_std=self.launch_speed_std, seed=seed, **self.overrides)


def fly_and_write(reference: PhasedTrajectory, run: RunConfig, params: DroneParams, directory: Path,
                  repeat: int = 0, enable_validation: bool = True,
                  validator: Optional[ArtifactValidator] = None) -> Dict[str, Any]:
    """One closed-loop run: logs and metrics record on disk, record returned.

    Aborted runs still produce a record (``status: aborted``) and whatever
    partial logs exist. Checks go to ``validator`` (the global one by default).
    """
    validator = validator or artifact_validator
    scenario = run.scenario
    digest = config_hash(params, run.to_dict())
    stem = f"run_{scenario_stem(scenario)}_r{repeat}"
    meta = artifact_metadata(digest, seed=run.seed, scenario=scenario.to_dict(), repeat=repeat)
    record: Dict[str, Any] = {'kind': 'run_metrics', 'scenario': scenario.to_dict(),
                              'seed': run.seed, 'repeat': repeat}
    try:
        result = run_closed_loop(run, reference, params)
        trajectory_log, controller_log = result.trajectory_log, result.controller_log
        record.update(status='completed', abort_reason=None, launch_speed=result.launch_speed,
                      metrics=result.metrics.to_dict())
    except RunAborted as e:
        trajectory_log, controller_log = e.trajectory_log, e.controller_log
        record.update(status='aborted', abort_reason=e.reason, message=str(e), metrics=None)

    if enable_validation:
        if trajectory_log is not None and len(trajectory_log):
            validator.validate_trajectory_frame(trajectory_log, scenario, component=f"{stem} trajectory")
        if controller_log is not None and len(controller_log):
            validator.validate_controller_log(controller_log, component=f"{stem} controller")
        validator.validate_metrics_record({'meta': meta, **record}, component=f"{stem} metrics")

    directory = Path(directory)
    if trajectory_log is not None and len(trajectory_log):
        safe_file_write(trajectory_log, directory / f"{stem}_trajectory-{digest}.csv", metadata=meta)
    if controller_log is not None and len(controller_log):
        safe_file_write(controller_log, directory / f"{stem}_controller-{digest}.csv", metadata=meta)
    safe_file_write(record, directory / f"{stem}_metrics-{digest}.json", metadata=meta)
    return record


def _write_reference_failure(scenario: GapScenario, params: DroneParams, settings: RunSettings, repeat: int,
                             error: GapFlightError, directory: Path) -> Dict[str, Any]:
    """Record a run that never started because its reference did not solve."""
    run = settings.run_config(scenario, run_seed(settings.seed, scenario, repeat))
    digest = config_hash(params, run.to_dict())
    record = {'kind': 'run_metrics', 'scenario': scenario.to_dict(), 'seed': run.seed, 'repeat': repeat,
              'status': 'aborted', 'abort_reason': 'reference', 'message': str(error), 'metrics': None}
    meta = artifact_metadata(digest, seed=run.seed, scenario=scenario.to_dict(), repeat=repeat)
    safe_file_write(record, Path(directory) / f"run_{scenario_stem(scenario)}_r{repeat}_metrics-{digest}.json",
                    metadata=meta)
    return record


def _experiment_task(task: Tuple[GapScenario, DroneParams, Any, RunSettings, Path, bool]
                     ) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    """Worker: solve one reference and fly its repeats; returns records and validation results."""
    scenario, params, trajopt_settings, settings, directory, enable_validation = task
    try:
        traj = solve_gap_trajectory(scenario, params, trajopt_settings)
    except GapFlightError as e:
        return [_write_reference_failure(scenario, params, settings, repeat, e, directory)
                for repeat in range(settings.repeats)], []
    validator = worker_validator(enable_validation)
    records = []
    for repeat in range(settings.repeats):
        run = settings.run_config(scenario, run_seed(settings.seed, scenario, repeat))
        reference = resample_trajectory(traj, run.controller.stage_dt)
        records.append(fly_and_write(reference, run, params, directory, repeat, enable_validation, validator))
    return records, validator.validation_results


class ExperimentMatrixRunner:
    """Closed-loop suite over a scenario grid, repeated per scenario."""

    def __init__(self, params: DroneParams, settings: Optional[RunSettings] = None, cfg: Config = config,
                 jobs: int = 1, enable_monitoring: bool = True, enable_validation: bool = True):
        self.logger = setup_logging(self.__class__.__name__)
        self.params = params
        self.settings = settings or RunSettings(repeats=cfg.experiment.repeats)
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.enable_monitoring = enable_monitoring
        self.enable_validation = enable_validation

    def run(self, scenarios: Sequence[GapScenario]) -> List[Dict[str, Any]]:
        total = len(scenarios) * self.settings.repeats
        with performance_monitor.monitor_operation(f"Experiment matrix ({total} runs)", RUNS, planned=total,
                                                   enabled=self.enable_monitoring) as perf:
            return self._run_impl(scenarios, perf)

    def _run_impl(self, scenarios: Sequence[GapScenario], perf: BatchMetrics) -> List[Dict[str, Any]]:
        directory = self.cfg.paths.runs_dir
        self.logger.info(f"🚀 {len(scenarios)} scenarios × {self.settings.repeats} repeats, {self.jobs} worker(s)")
        tracker = ProgressTracker(len(scenarios), "Scenarios", self.logger)
        tasks = [(s, self.params, self.cfg.trajopt, self.settings, directory, self.enable_validation)
                 for s in scenarios]
        records = []
        for batch, results in _map(_experiment_task, tasks, self.jobs, tracker):
            records.extend(batch)
            for record in batch:
                perf.record_run(record)
            artifact_validator.merge(results)

        completed = sum(r['status'] == 'completed' for r in records)
        reasons = pd.Series([r['abort_reason'] for r in records if r['status'] != 'completed'], dtype=object)
        self.logger.info(f"📊 Experiment matrix: {completed}/{len(records)} runs completed")
        for reason, count in reasons.value_counts().items():
            self.logger.warning(f"⚠️  {count} runs aborted ({reason})")
        return records


# ==============================================================================
# --- Report ---
# ==============================================================================

def write_report(source: Path, cfg: Config = config, enable_validation: bool = True) -> Tuple[Path, Path]:
    """Aggregate every metrics record under ``source``; returns (JSON, long CSV) paths."""
    records = load_records(source)
    if enable_validation:
        _validate_sources(Path(source))
    analysis = cfg.analysis
    report = build_report(records, speed_gain_margin=analysis.speed_gain_margin,
                          min_samples=analysis.min_samples_for_test,
                          significance_level=analysis.significance_level)
    digest = content_hash(records.to_dict(orient='records'))
    meta = artifact_metadata(digest, records=len(records))
    directory = cfg.paths.reports_dir
    json_path = safe_file_write(report, directory / f"report-{digest}.json", metadata=meta)
    csv_path = safe_file_write(long_format(records), directory / f"report_long-{digest}.csv", metadata=meta)
    logger.info(f"📊 Report over {len(records)} records written to {json_path}")
    return json_path, csv_path


def _validate_sources(source: Path) -> None:
    for path in sorted(source.rglob('*.json')):
        with open(path) as f:
            payload = json.load(f)
        if payload.get('kind') in ('run_metrics', 'trajectory_matrix'):
            artifact_validator.validate_metrics_record(payload, component=path.name)


def iter_reference_files(paths: Iterable[Path]) -> List[Path]:
    """Expand directories into their trajectory CSVs."""
    files: List[Path] = []
    for path in map(Path, paths):
        files.extend(sorted(path.glob('traj_*.csv')) if path.is_dir() else [path])
    return files
