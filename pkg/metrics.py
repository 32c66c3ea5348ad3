#!/usr/bin/env python3
"""
Gap Flight Metrics and Statistics
=================================

Per-run closed-loop metrics, the Mann-Whitney U test and the aggregation of
run and trajectory records into summary statistics with ordering checks.
"""

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata, tiecorrect

from errors import ArtifactError, IncompleteRun, NoData, TooFewSamples
from params import GapScenario
from utils import safe_divide, setup_logging

logger = setup_logging(__name__)

SWEPT_LEVEL = 0.95
SWEEP_START_LEVEL = 0.5
SWEEP_AHEAD_WINDOW = 0.5

RUN_METRIC_NAMES = [
    'altitude_error_at_gap', 'mean_recovery_error', 'altitude_rmse', 'sweep_initiation_distance',
    'max_pitch', 'solver_failures', 'swept_duration', 'sweep_start_distance', 'mean_sweep_ahead',
    'speed_at_gap', 'pitch_at_gap',
]
TRAJECTORY_METRIC_NAMES = ['anticipation_abs_dz', 'gap_speed', 'gap_speed_gain', 'mean_gap_pitch',
                           'swept_duration', 'max_pitch']


@dataclass
class RunMetrics:
    altitude_error_at_gap: float
    mean_recovery_error: float
    altitude_rmse: float
    sweep_initiation_distance: float
    gap_constraint_satisfied: bool
    max_pitch: float
    solver_failures: int = 0
    swept_duration: float = float('nan')
    sweep_start_distance: float = float('nan')
    mean_sweep_ahead: float = float('nan')
    speed_at_gap: float = float('nan')
    pitch_at_gap: float = float('nan')
    mean_speed_prediction_error: float = float('nan')
    mean_pitch_rate_prediction_error: float = float('nan')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ==============================================================================
# --- Run Metrics ---
# ==============================================================================

def _reference_arrays(reference) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(reference, pd.DataFrame):
        x, z = reference['x'].to_numpy(float), reference['z'].to_numpy(float)
    else:
        x, z = reference.states[:, 0], reference.states[:, 1]
    order = np.argsort(x, kind='stable')
    return x[order], z[order]


def _first_crossing(values: np.ndarray, level: float) -> Optional[int]:
    hits = np.flatnonzero(values >= level)
    return int(hits[0]) if hits.size else None


def compute_metrics(log: pd.DataFrame, reference, scenario: GapScenario,
                    controller_log: Optional[pd.DataFrame] = None) -> RunMetrics:
    """Metrics of one closed-loop log against its reference (frame or PhasedTrajectory)."""
    t = log['t'].to_numpy(float)
    x = log['x'].to_numpy(float)
    z = log['z'].to_numpy(float)
    theta = log['theta'].to_numpy(float)
    x_w = log['x_w'].to_numpy(float)
    speed = np.hypot(log['u'].to_numpy(float), log['w'].to_numpy(float))

    crossing = np.flatnonzero((x[:-1] <= scenario.gap_x) & (x[1:] >= scenario.gap_x))
    if crossing.size == 0:
        raise IncompleteRun(f"log never crosses the gap at x = {scenario.gap_x} m")
    i = int(crossing[0])
    frac = safe_divide(scenario.gap_x - x[i], x[i + 1] - x[i])

    def at_gap(values: np.ndarray) -> float:
        return float(values[i] + frac * (values[i + 1] - values[i]))

    ref_x, ref_z = _reference_arrays(reference)
    common = (x >= ref_x[0]) & (x <= ref_x[-1])
    z_error = z - np.interp(x, ref_x, ref_z)
    rmse = float(np.sqrt(np.mean(z_error[common] ** 2))) if np.any(common) else float('nan')

    recovery = (x >= scenario.gap_exit_x) & (x <= scenario.recovery_end_x)
    recovery_error = float(np.mean(np.abs(z_error[recovery]))) if np.any(recovery) else float('nan')

    swept_idx = _first_crossing(x_w, SWEPT_LEVEL)
    start_idx = _first_crossing(x_w, SWEEP_START_LEVEL)
    inside = scenario.in_threshold(x)
    ahead = (x >= scenario.anticipation_end_x - SWEEP_AHEAD_WINDOW) & (x < scenario.anticipation_end_x)
    swept = x_w >= SWEPT_LEVEL
    dt = np.diff(t, append=t[-1])

    failures = 0
    if controller_log is not None and len(controller_log):
        failures = int((~controller_log['status'].isin(['Converged', 'MaxIter'])).sum())

    return RunMetrics(
        altitude_error_at_gap=at_gap(z) - scenario.gap_center_z,
        mean_recovery_error=recovery_error,
        altitude_rmse=rmse,
        sweep_initiation_distance=(scenario.gap_x - x[swept_idx]) if swept_idx is not None else float('nan'),
        gap_constraint_satisfied=bool(np.any(inside) and np.all(x_w[inside] >= SWEPT_LEVEL)),
        max_pitch=float(theta.max()),
        solver_failures=failures,
        swept_duration=float(dt[swept].sum()),
        sweep_start_distance=(scenario.gap_x - x[start_idx]) if start_idx is not None else float('nan'),
        mean_sweep_ahead=float(x_w[ahead].mean()) if np.any(ahead) else float('nan'),
        speed_at_gap=at_gap(speed),
        pitch_at_gap=at_gap(theta),
    )


# ==============================================================================
# --- Mann-Whitney U ---
# ==============================================================================

class MannWhitneyResult(NamedTuple):
    u: float
    p: float


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float], min_samples: int = 3) -> MannWhitneyResult:
    """Rank-sum U of ``sample_a`` and the two-sided normal-approximation p value.

    Ties get mid-ranks and the variance tie correction; a 0.5 continuity
    correction is applied to |U - n₁n₂/2|.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 < min_samples or n2 < min_samples:
        raise TooFewSamples(f"Mann-Whitney U needs ≥ {min_samples} samples per group, got {n1} and {n2}")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mean = n1 * n2 / 2.0
    variance = n1 * n2 * (n1 + n2 + 1) / 12.0 * tiecorrect(ranks)
    if variance <= 0:
        return MannWhitneyResult(u=u, p=1.0)
    z = (abs(u - mean) - 0.5) / np.sqrt(variance)
    return MannWhitneyResult(u=u, p=float(min(1.0, 2.0 * norm.sf(z))))


# ==============================================================================
# --- Aggregation ---
# ==============================================================================

def load_records(directory: Union[str, Path]) -> pd.DataFrame:
    """Flatten every run-metrics and trajectory-matrix JSON under ``directory``."""
    rows: List[Dict[str, Any]] = []
    for path in sorted(Path(directory).rglob('*.json')):
        try:
            with open(path) as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ArtifactError(f"unreadable artifact {path}: {e}") from e
        kind = payload.get('kind')
        if kind == 'run_metrics':
            rows.append(_run_row(payload))
        elif kind == 'trajectory_matrix':
            rows.extend(_trajectory_rows(payload))
    if not rows:
        raise NoData(f"no metrics records under {directory}")
    return pd.DataFrame(rows)


def _scenario_columns(scenario: Dict[str, Any]) -> Dict[str, Any]:
    return {'case': int(scenario['objective']), 'speed': float(scenario['initial_speed']),
            'gap_x': float(scenario['gap_x']), 'threshold': float(scenario['gap_threshold'])}


def _run_row(payload: Dict[str, Any]) -> Dict[str, Any]:
    row = {'source': 'closed_loop', **_scenario_columns(payload['scenario']),
           'seed': payload.get('seed'), 'repeat': payload.get('repeat'),
           'completed': payload.get('status') == 'completed',
           'abort_reason': payload.get('abort_reason')}
    metrics = payload.get('metrics') or {}
    for name in RUN_METRIC_NAMES:
        value = metrics.get(name)
        row[name] = float('nan') if value is None else float(value)
    row['gap_constraint_satisfied'] = bool(metrics.get('gap_constraint_satisfied', False))
    return row


def _trajectory_rows(payload: Dict[str, Any]) -> List[Dict[str, Any]]:
    rows = []
    for item in payload.get('trajectories', []):
        row = {'source': 'trajectory', **_scenario_columns(item['scenario']),
               'completed': item.get('status') == 'ok'}
        summary = item.get('summary') or {}
        for name in TRAJECTORY_METRIC_NAMES:
            value = summary.get(name)
            row[name] = float('nan') if value is None else float(value)
        rows.append(row)
    return rows


def _group_stats(df: pd.DataFrame, keys: List[str], metrics: Iterable[str]) -> List[Dict[str, Any]]:
    groups = []
    for key, group in df.groupby(keys, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        entry = {k: v for k, v in zip(keys, key)}
        entry['n'] = int(len(group))
        entry['metrics'] = {}
        for name in metrics:
            values = group[name].dropna()
            if values.empty:
                continue
            entry['metrics'][name] = {'median': float(values.median()), 'mean': float(values.mean()),
                                      'std': float(values.std(ddof=0))}
        groups.append(entry)
    return groups


def _pairwise_tests(df: pd.DataFrame, key: str, metric: str, min_samples: int,
                    significance_level: float) -> Dict[str, Any]:
    tests = {}
    levels = sorted(df[key].unique())
    for a, b in itertools.combinations(levels, 2):
        sa = df.loc[df[key] == a, metric].dropna()
        sb = df.loc[df[key] == b, metric].dropna()
        label = f"{a:g}_vs_{b:g}"
        try:
            result = mann_whitney_u(sa, sb, min_samples=min_samples)
            tests[label] = {'u': result.u, 'p': result.p, 'n': [int(sa.size), int(sb.size)],
                            'significant': bool(result.p < significance_level)}
        except TooFewSamples as e:
            tests[label] = {'error': 'TooFewSamples', 'message': str(e)}
    return tests


def _median(df: pd.DataFrame, column: str, **where: Any) -> Optional[float]:
    mask = np.ones(len(df), dtype=bool)
    for key, value in where.items():
        mask &= (df[key] == value).to_numpy()
    values = df.loc[mask, column].dropna()
    return float(values.median()) if len(values) else None


def _gt(a: Optional[float], b: Optional[float]) -> Optional[bool]:
    if a is None or b is None:
        return None
    return bool(a > b)


def build_report(records: pd.DataFrame, speed_gain_margin: float = 0.5, min_samples: int = 3,
                 significance_level: float = 0.01) -> Dict[str, Any]:
    """Group statistics, pairwise tests and the ordering checks."""
    if records.empty:
        raise NoData("no records to report")
    report: Dict[str, Any] = {'kind': 'report'}
    orderings: Dict[str, Any] = {}

    trajectories = records[(records['source'] == 'trajectory') & records['completed']]
    if not trajectories.empty:
        report['trajectories'] = {
            'groups': _group_stats(trajectories, ['case'], TRAJECTORY_METRIC_NAMES),
            'tests': {name: _pairwise_tests(trajectories, 'case', name, min_samples, significance_level)
                      for name in ('mean_gap_pitch', 'gap_speed_gain')},
        }
        pitch = {c: _median(trajectories, 'mean_gap_pitch', case=c) for c in (1, 2, 3)}
        gain = {c: _median(trajectories, 'gap_speed_gain', case=c) for c in (1, 3)}
        orderings['case2_pitch_gt_case1'] = _gt(pitch[2], pitch[1])
        orderings['case1_pitch_gt_case3'] = _gt(pitch[1], pitch[3])
        difference = (gain[3] - gain[1]) if None not in gain.values() else None
        orderings['case3_speed_gain_gt_case1'] = None if difference is None else bool(difference >= speed_gain_margin)
        orderings['median_speed_gain_difference'] = difference

    runs = records[records['source'] == 'closed_loop']
    if not runs.empty:
        runs = runs.assign(abs_altitude_error_at_gap=runs['altitude_error_at_gap'].abs(),
                           gap_constraint_satisfied=runs['gap_constraint_satisfied'].astype(bool))
        metrics = [*RUN_METRIC_NAMES, 'abs_altitude_error_at_gap']
        completed = runs[runs['completed']]
        report['closed_loop'] = {
            'runs': int(len(runs)),
            'completed': int(len(completed)),
            'collision_free_fraction': float(runs['gap_constraint_satisfied'].mean()),
            'groups': _group_stats(completed, ['case', 'speed', 'threshold'], metrics) if len(completed) else [],
            'speed_tests': _pairwise_tests(completed[completed['case'] == 1], 'speed',
                                           'abs_altitude_error_at_gap', min_samples,
                                           significance_level) if len(completed) else {},
        }
        orderings['all_runs_collision_free'] = bool(runs['gap_constraint_satisfied'].all())
        case1 = completed[completed['case'] == 1]
        means = case1.groupby('speed')['abs_altitude_error_at_gap'].mean().sort_index()
        orderings['altitude_error_non_increasing_with_speed'] = (
            bool(np.all(np.diff(means.to_numpy()) <= 0)) if len(means) > 1 else None)

    report['orderings'] = orderings
    return report


def long_format(records: pd.DataFrame) -> pd.DataFrame:
    """One row per (record, metric) for plotting."""
    id_columns = [c for c in ('source', 'case', 'speed', 'gap_x', 'threshold', 'seed', 'repeat')
                  if c in records.columns]
    value_columns = [c for c in (*RUN_METRIC_NAMES, *TRAJECTORY_METRIC_NAMES) if c in records.columns]
    long = records.melt(id_vars=id_columns, value_vars=list(dict.fromkeys(value_columns)),
                        var_name='metric', value_name='value')
    return long.dropna(subset=['value']).sort_values([*id_columns, 'metric'], kind='stable').reset_index(drop=True)
