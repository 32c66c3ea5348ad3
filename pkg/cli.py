#!/usr/bin/env python3
"""
Gap Flight Command Line
=======================

Single entry point wiring the toolkit:

    gapflight validate-config [--config FILE]
    gapflight aero-curves
    gapflight trajopt --speed 6 --gap-x 4 --threshold 0.8 --case 1 [--out FILE]
    gapflight trajopt --matrix [--case 1]
    gapflight simulate --reference FILE_OR_DIR [--noise 1] [--mismatch 0.1] [--latency 0.065] [--repeat 3]
    gapflight experiment-matrix
    gapflight report [--source DIR]

Exit codes: 0 ok, 2 configuration, 3 solver, 4 run aborted, 5 data/I-O.
Errors are echoed as a JSON object on stderr.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from aero import aero_curves
from config import Config
from data_validation import artifact_validator
from errors import DataError, GapFlightError, ValidationError
from params import GapScenario, load_config, params_to_dict
from performance_monitoring import performance_monitor
from pipelines import (ExperimentMatrixRunner, RunSettings, TrajectoryMatrixRunner, config_hash,
                       experiment_grid, fly_and_write, iter_reference_files, read_trajectory,
                       run_seed, trajectory_grid, write_report, write_trajectory)
from trajopt import resample_trajectory, solve_gap_trajectory, trajectory_summary
from utils import artifact_metadata, safe_file_write, set_log_level, setup_logging

logger = setup_logging(__name__)

DATA_EXIT_CODE = 5


# ==============================================================================
# --- Argument Parsing ---
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, help="Drone parameter file (JSON or YAML)")
    shared.add_argument("--out-dir", type=str, default="out", help="Output root (default: out)")
    shared.add_argument("--seed", type=int, default=0, help="Base random seed (default: 0)")
    shared.add_argument("--jobs", type=int, default=1, help="Worker processes for batch commands")
    shared.add_argument("--log-level", type=str, default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    shared.add_argument("--no-monitoring", action="store_true", help="Disable performance monitoring")
    shared.add_argument("--no-validation", action="store_true", help="Disable artifact validation")

    parser = argparse.ArgumentParser(prog="gapflight", description="Morphing-wing gap passage toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate-config", parents=[shared], help="Load, validate and echo the parameters")
    sub.add_parser("aero-curves", parents=[shared], help="Export cL/cD/cM curves as CSV")

    trajopt = sub.add_parser("trajopt", parents=[shared], help="Solve reference trajectories")
    trajopt.add_argument("--speed", type=float, help="Approach speed V0 [m/s]")
    trajopt.add_argument("--gap-x", type=float, help="Gap position [m]")
    trajopt.add_argument("--threshold", type=float, help="Gap threshold length [m]")
    trajopt.add_argument("--case", type=int, choices=[1, 2, 3], help="Objective case")
    trajopt.add_argument("--out", type=str, help="Output CSV (single scenario)")
    trajopt.add_argument("--matrix", action="store_true", help="Solve the full scenario grid")

    simulate = sub.add_parser("simulate", parents=[shared], help="Closed-loop runs against references")
    simulate.add_argument("--reference", type=str, required=True, nargs="+",
                          help="Trajectory CSV file(s) or directories")
    simulate.add_argument("--noise", type=float, default=1.0, help="Sensor noise scale (0 disables)")
    simulate.add_argument("--mismatch", type=float, default=0.0, help="Plant perturbation range, e.g. 0.1")
    simulate.add_argument("--latency", type=float, default=0.065, help="Actuation latency [s]")
    simulate.add_argument("--no-compensation", action="store_true", help="Disable delay compensation")
    simulate.add_argument("--repeat", type=int, default=1, help="Runs per reference")

    matrix = sub.add_parser("experiment-matrix", parents=[shared], help="Closed-loop suite plus report")
    matrix.add_argument("--noise", type=float, default=1.0)
    matrix.add_argument("--mismatch", type=float, default=0.0)
    matrix.add_argument("--latency", type=float, default=0.065)
    matrix.add_argument("--no-compensation", action="store_true")
    matrix.add_argument("--repeat", type=int, default=None, help="Repeats per scenario (default: 3)")

    report = sub.add_parser("report", parents=[shared], help="Summary statistics over metrics records")
    report.add_argument("--source", type=str, help="Directory of records (default: the output root)")
    return parser


def _validate_args(args: argparse.Namespace) -> None:
    if args.jobs < 1:
        raise ValidationError("jobs", "must be ≥ 1")
    if getattr(args, "repeat", None) is not None and args.repeat < 1:
        raise ValidationError("repeat", "must be ≥ 1")
    if args.command == "trajopt" and not args.matrix:
        missing = [name for name in ("speed", "gap_x", "threshold") if getattr(args, name) is None]
        if missing:
            raise ValidationError(missing[0].replace("_", "-"), "required unless --matrix is given")


# ==============================================================================
# --- Subcommands ---
# ==============================================================================

def cmd_validate_config(args, params, cfg: Config) -> int:
    resolved = params_to_dict(params, include_derived=True)
    print(json.dumps({'config_hash': config_hash(params), 'params': resolved}, indent=2, default=str))
    return 0


def cmd_aero_curves(args, params, cfg: Config) -> int:
    digest = config_hash(params)
    path = safe_file_write(aero_curves(params), cfg.paths.reports_dir / f"aero_curves-{digest}.csv",
                           metadata=artifact_metadata(digest))
    logger.info(f"✅ Aero curves written to {path}")
    print(path)
    return 0


def cmd_trajopt(args, params, cfg: Config) -> int:
    runner_kwargs = dict(cfg=cfg, jobs=args.jobs, enable_monitoring=not args.no_monitoring,
                         enable_validation=not args.no_validation)
    if args.matrix:
        cases = [args.case] if args.case else list(cfg.experiment.cases)
        scenarios = trajectory_grid(cases, cfg)
        stem = "trajectory_matrix" + (f"_c{args.case}" if args.case else "")
        print(TrajectoryMatrixRunner(params, **runner_kwargs).run(scenarios, stem=stem))
        return 0

    tr = cfg.trajopt
    scenario = GapScenario(gap_x=args.gap_x, gap_threshold=args.threshold, initial_speed=args.speed,
                           objective=args.case or 1, gap_center_z=tr.gap_center_z,
                           recovery_length=tr.recovery_length, steady_length=tr.steady_length)
    traj = solve_gap_trajectory(scenario, params, tr)
    if not args.no_validation:
        artifact_validator.validate_trajectory_frame(traj.to_frame(), scenario)
    path = write_trajectory(traj, cfg.paths.trajectories_dir, params, asdict(tr), path=args.out)
    logger.info(f"✅ {traj.meta['iterations']} iterations, summary {trajectory_summary(traj)}")
    print(path)
    return 0


def _run_settings(args, repeats: int) -> RunSettings:
    return RunSettings(noise_scale=args.noise, latency=args.latency, compensate_delay=not args.no_compensation,
                       mismatch_range=args.mismatch, repeats=repeats, seed=args.seed)


def cmd_simulate(args, params, cfg: Config) -> int:
    files = iter_reference_files(args.reference)
    if not files:
        raise DataError(f"no reference trajectories in {args.reference}")
    settings = _run_settings(args, args.repeat)
    aborted = []
    for path in files:
        traj = read_trajectory(path, params)
        for repeat in range(settings.repeats):
            run = settings.run_config(traj.scenario, run_seed(settings.seed, traj.scenario, repeat))
            reference = resample_trajectory(traj, run.controller.stage_dt)
            record = fly_and_write(reference, run, params, cfg.paths.runs_dir, repeat,
                                   enable_validation=not args.no_validation)
            if record['status'] != 'completed':
                aborted.append({'reference': path.name, 'repeat': repeat,
                                'reason': record['abort_reason'], 'message': record.get('message')})
            else:
                m = record['metrics']
                logger.info(f"✅ {path.name} r{repeat}: gap error {m['altitude_error_at_gap'] * 100:.1f} cm, "
                            f"RMSE {m['altitude_rmse'] * 100:.1f} cm")
    if aborted:
        print(json.dumps({'error': 'RunAborted', 'exit_code': 4, 'runs': aborted}), file=sys.stderr)
        return 4
    return 0


def cmd_experiment_matrix(args, params, cfg: Config) -> int:
    repeats = args.repeat or cfg.experiment.repeats
    runner = ExperimentMatrixRunner(params, _run_settings(args, repeats), cfg=cfg, jobs=args.jobs,
                                    enable_monitoring=not args.no_monitoring,
                                    enable_validation=not args.no_validation)
    runner.run(experiment_grid(cfg))
    json_path, _ = write_report(cfg.paths.runs_dir, cfg, enable_validation=not args.no_validation)
    print(json_path)
    return 0


def cmd_report(args, params, cfg: Config) -> int:
    source = Path(args.source) if args.source else cfg.paths.out_dir
    json_path, csv_path = write_report(source, cfg, enable_validation=not args.no_validation)
    print(json_path)
    print(csv_path)
    return 0


COMMANDS = {
    "validate-config": cmd_validate_config,
    "aero-curves": cmd_aero_curves,
    "trajopt": cmd_trajopt,
    "simulate": cmd_simulate,
    "experiment-matrix": cmd_experiment_matrix,
    "report": cmd_report,
}


# ==============================================================================
# --- Main Execution ---
# ==============================================================================

def _fail(exit_code: int, error: str, message: str) -> int:
    print(json.dumps({'error': error, 'message': message, 'exit_code': exit_code}), file=sys.stderr)
    return exit_code


def run_command(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and map errors to exit codes."""
    args = build_parser().parse_args(argv)
    set_log_level(getattr(logging, args.log_level))
    try:
        _validate_args(args)
        params = load_config(args.config)
        cfg = Config(args.out_dir)
        cfg.paths.ensure()
        performance_monitor.enabled = not args.no_monitoring
        artifact_validator.enabled = not args.no_validation
        artifact_validator.reset()
        status = COMMANDS[args.command](args, params, cfg)
    except GapFlightError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return _fail(DATA_EXIT_CODE, e.__class__.__name__, str(e))

    if not args.no_monitoring and performance_monitor.metrics:
        performance_monitor.print_performance_summary()
        performance_monitor.save_performance_report(cfg.paths.reports_dir / f"performance-{args.command}.json")
    if not args.no_validation and artifact_validator.validation_results:
        artifact_validator.print_validation_summary()
    return status


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
