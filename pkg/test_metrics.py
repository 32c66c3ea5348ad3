import json

import numpy as np
import pandas as pd
import pytest
from scipy.stats import mannwhitneyu

from errors import ArtifactError, IncompleteRun, NoData, TooFewSamples
from metrics import (RUN_METRIC_NAMES, build_report, compute_metrics, load_records, long_format,
                     mann_whitney_u)


def run_record(speed, altitude_error, case=1, satisfied=True, status='completed'):
    metrics = {name: 0.0 for name in RUN_METRIC_NAMES}
    metrics.update(altitude_error_at_gap=altitude_error, gap_constraint_satisfied=satisfied)
    return {'kind': 'run_metrics', 'status': status, 'seed': 0, 'repeat': 0,
            'abort_reason': None if status == 'completed' else 'stall',
            'scenario': {'objective': case, 'initial_speed': speed, 'gap_x': 4.0, 'gap_threshold': 0.8},
            'metrics': metrics if status == 'completed' else None}


def trajectory_item(case, pitch, gain):
    return {'status': 'ok', 'scenario': {'objective': case, 'initial_speed': 6.0, 'gap_x': 4.0, 'gap_threshold': 0.8},
            'summary': {'mean_gap_pitch': pitch, 'gap_speed_gain': gain, 'gap_speed': 6.0 + gain}}


def write_records(directory, payloads):
    for i, payload in enumerate(payloads):
        (directory / f"record_{i}.json").write_text(json.dumps(payload))
    return directory


@pytest.fixture
def level_log(level6):
    return level6.to_frame()


class TestRunMetrics:
    def test_identical_log_has_no_error(self, level6, level_log, scenario6):
        m = compute_metrics(level_log, level6, scenario6)
        assert m.altitude_error_at_gap == pytest.approx(level6.states[0, 1] - scenario6.gap_center_z, abs=1e-12)
        assert m.altitude_rmse == pytest.approx(0.0, abs=1e-12)
        assert m.speed_at_gap == pytest.approx(6.0, rel=1e-9)
        assert m.solver_failures == 0

    def test_offset_log(self, level6, level_log, scenario6):
        log = level_log.assign(z=level_log['z'] - 0.05)
        m = compute_metrics(log, level6, scenario6)
        assert m.altitude_error_at_gap == pytest.approx(level6.states[0, 1] - 0.05, abs=1e-12)
        assert m.altitude_rmse == pytest.approx(0.05)
        assert m.mean_recovery_error == pytest.approx(0.05)

    def test_unswept_passage(self, level6, level_log, scenario6):
        m = compute_metrics(level_log, level6, scenario6)
        assert not m.gap_constraint_satisfied
        assert np.isnan(m.sweep_initiation_distance)
        assert m.swept_duration == 0.0

    def test_swept_passage(self, level6, level_log, scenario6):
        log = level_log.copy()
        swept = log['x'] >= 3.0
        log.loc[swept, 'x_w'] = 1.0
        m = compute_metrics(log, level6, scenario6)
        first = log.loc[swept].iloc[0]
        assert m.gap_constraint_satisfied
        assert m.sweep_initiation_distance == pytest.approx(4.0 - first['x'])
        assert m.sweep_start_distance == pytest.approx(m.sweep_initiation_distance)
        assert m.swept_duration == pytest.approx(log['t'].iloc[-1] - first['t'])

    def test_counts_held_steps(self, level6, level_log, scenario6):
        controller_log = pd.DataFrame({'status': ['Converged', 'HoldLast', 'MaxIter', 'HoldLast']})
        assert compute_metrics(level_log, level6, scenario6, controller_log).solver_failures == 2

    def test_log_short_of_the_gap(self, level6, level_log, scenario6):
        with pytest.raises(IncompleteRun):
            compute_metrics(level_log[level_log['x'] < 3.0], level6, scenario6)


class TestMannWhitney:
    def test_separated_samples(self):
        result = mann_whitney_u([1, 2, 3], [10, 11, 12])
        assert result.u == 0.0
        assert result.p == pytest.approx(0.081, abs=0.003)

    def test_matches_scipy_with_ties(self, rng):
        a = rng.integers(0, 6, 12).astype(float)
        b = rng.integers(2, 8, 9).astype(float)
        ours = mann_whitney_u(a, b)
        theirs = mannwhitneyu(a, b, use_continuity=True, alternative='two-sided', method='asymptotic')
        assert ours.u == pytest.approx(theirs.statistic)
        assert ours.p == pytest.approx(theirs.pvalue, rel=1e-9)

    def test_identical_samples(self):
        assert mann_whitney_u([1.0] * 3, [1.0] * 4).p == 1.0

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            mann_whitney_u([1.0, 2.0], [3.0, 4.0, 5.0])


class TestAggregation:
    def test_missing_records(self, tmp_path):
        with pytest.raises(NoData):
            load_records(tmp_path)

    def test_unreadable_record(self, tmp_path):
        (tmp_path / "broken.json").write_text("{")
        with pytest.raises(ArtifactError):
            load_records(tmp_path)

    def test_other_json_is_ignored(self, tmp_path):
        write_records(tmp_path, [{'kind': 'report'}, run_record(6.0, 0.01)])
        assert len(load_records(tmp_path)) == 1

    def test_report(self, tmp_path):
        payloads = [run_record(5.0, -0.03), run_record(6.0, 0.02), run_record(7.0, 0.01),
                    run_record(6.0, 0.0, status='aborted', satisfied=False),
                    {'kind': 'trajectory_matrix', 'trajectories': [
                        trajectory_item(1, 0.2, 0.2), trajectory_item(2, 0.3, 0.1), trajectory_item(3, 0.1, 1.0)]}]
        records = load_records(write_records(tmp_path, payloads))
        report = build_report(records)

        closed_loop = report['closed_loop']
        assert closed_loop['runs'] == 4 and closed_loop['completed'] == 3
        assert closed_loop['collision_free_fraction'] == pytest.approx(0.75)
        group = closed_loop['groups'][0]
        assert group['n'] == 1
        assert group['metrics']['altitude_error_at_gap']['std'] == 0.0
        assert all(test['error'] == 'TooFewSamples' for test in closed_loop['speed_tests'].values())

        orderings = report['orderings']
        assert orderings['altitude_error_non_increasing_with_speed'] is True
        assert orderings['all_runs_collision_free'] is False
        assert orderings['case2_pitch_gt_case1'] is True
        assert orderings['case1_pitch_gt_case3'] is True
        assert orderings['median_speed_gain_difference'] == pytest.approx(0.8)
        assert orderings['case3_speed_gain_gt_case1'] is True

    def test_speed_gain_margin(self, tmp_path):
        payloads = [{'kind': 'trajectory_matrix', 'trajectories': [trajectory_item(1, 0.2, 0.2),
                                                                   trajectory_item(3, 0.1, 0.4)]}]
        report = build_report(load_records(write_records(tmp_path, payloads)))
        assert report['orderings']['case3_speed_gain_gt_case1'] is False
        assert report['orderings']['case2_pitch_gt_case1'] is None

    def test_significance_flag(self, tmp_path):
        payloads = ([run_record(5.0, e) for e in (0.10, 0.11, 0.12)]
                    + [run_record(7.0, e) for e in (0.01, 0.02, 0.03)])
        records = load_records(write_records(tmp_path, payloads))
        strict = build_report(records)['closed_loop']['speed_tests']['5_vs_7']
        assert strict['p'] == pytest.approx(0.081, abs=3e-3)
        assert strict['significant'] is False
        loose = build_report(records, significance_level=0.1)['closed_loop']['speed_tests']['5_vs_7']
        assert loose['significant'] is True
        assert 'error' in build_report(records, min_samples=4)['closed_loop']['speed_tests']['5_vs_7']

    def test_long_format(self, tmp_path):
        records = load_records(write_records(tmp_path, [run_record(6.0, 0.02)]))
        long = long_format(records)
        assert set(long['metric']) == set(RUN_METRIC_NAMES)
        assert long.loc[long['metric'] == 'altitude_error_at_gap', 'value'].item() == pytest.approx(0.02)
