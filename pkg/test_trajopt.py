import numpy as np
import pytest

from config import TrajoptConfig
from dynamics import NX, THETA, U, UW, X, XW, XWDOT, Z
from errors import DomainError
from params import GapScenario, ObjectiveCase
from trajopt import (FRAME_COLUMNS, Phase, PhasedTrajectory, build_multiphase_problem, check_gap_constraints,
                     evaluate_cost, mesh_defects, objective_terms, resample_trajectory, solve_gap_trajectory,
                     trajectory_summary)


@pytest.fixture
def level(level6):
    return level6


class TestObjectives:
    def test_terms_per_case(self):
        assert [t.name for t in objective_terms(1)] == ['altitude_variation']
        assert [t.name for t in objective_terms(ObjectiveCase.MIN_SPEED_VARIATION)] == ['speed_variation']
        assert [t.name for t in objective_terms(3)] == ['swept_time', 'altitude_regularizer']

    def test_pinned_altitude_costs_nothing(self, level):
        assert evaluate_cost(objective_terms(1), level) == pytest.approx(0.0, abs=1e-15)

    def test_altitude_offset(self, level):
        shifted = PhasedTrajectory(times=level.times, states=level.states.copy(), inputs=level.inputs,
                                   phases=level.phases, phase_times=level.phase_times, scenario=level.scenario)
        shifted.states[:, Z] = 0.1
        assert evaluate_cost(objective_terms(1), shifted) == pytest.approx(0.01 * level.duration)

    def test_speed_variation(self, level):
        error = level.states[0, U] - level.scenario.initial_speed
        assert evaluate_cost(objective_terms(2), level) == pytest.approx(error ** 2 * level.duration)

    def test_swept_time(self, level):
        assert evaluate_cost(objective_terms(3), level) == pytest.approx(level.phase_durations[1])


class TestContainer:
    def test_frame_layout(self, level):
        frame = level.to_frame()
        assert list(frame.columns) == FRAME_COLUMNS
        assert frame['phase'].tolist() == level.phases.tolist()

    def test_frame_round_trip_infers_phase_times(self, level, scenario6, params):
        again = PhasedTrajectory.from_frame(level.to_frame(), scenario6, params)
        np.testing.assert_allclose(again.phase_times, level.phase_times)
        np.testing.assert_array_equal(again.states, level.states)

    def test_missing_column(self, level, scenario6):
        with pytest.raises(DomainError):
            PhasedTrajectory.from_frame(level.to_frame().drop(columns=['x_w']), scenario6)

    def test_times_must_increase(self, level):
        times = level.times.copy()
        times[3] = times[2]
        with pytest.raises(DomainError):
            PhasedTrajectory(times=times, states=level.states, inputs=level.inputs, phases=level.phases,
                             phase_times=level.phase_times, scenario=level.scenario)

    def test_phases_must_be_ordered(self, level):
        phases = level.phases.copy()
        phases[-1] = 1
        with pytest.raises(DomainError):
            PhasedTrajectory(times=level.times, states=level.states, inputs=level.inputs, phases=phases,
                             phase_times=level.phase_times, scenario=level.scenario)

    def test_sample_interpolates_nodes(self, level):
        states, inputs = level.sample(level.times)
        np.testing.assert_allclose(states, level.states, atol=1e-9)
        np.testing.assert_allclose(inputs, level.inputs, atol=1e-12)

    def test_trim_flight_has_no_mesh_defect(self, level, params):
        assert mesh_defects(level, params, factor=4).max() < 1e-6


class TestResample:
    def test_uniform_grid(self, level):
        dt = 1 / 30
        resampled = resample_trajectory(level, dt)
        np.testing.assert_allclose(np.diff(resampled.times), dt)
        assert resampled.duration == pytest.approx(level.duration)
        assert np.all(np.diff(resampled.phases) >= 0)
        assert set(resampled.phases) == {1, 2, 3, 4}
        np.testing.assert_allclose(resampled.states[:, X], 6.0 * resampled.times, atol=1e-9)

    def test_query_at_nodes_after_resampling(self, level):
        resampled = resample_trajectory(level, 1 / 30)
        states, _ = resampled.sample(level.times)
        np.testing.assert_allclose(states, level.states, atol=1e-9)

    @pytest.mark.parametrize("dt", [0.0, -0.01, 0.1])
    def test_invalid_step(self, level, dt):
        with pytest.raises(DomainError):
            resample_trajectory(level, dt)


class TestSummaryAndChecks:
    def test_level_flight_summary(self, level, trim6):
        summary = trajectory_summary(level)
        assert summary['gap_speed'] == pytest.approx(6.0)
        assert summary['gap_speed_gain'] == pytest.approx(0.0, abs=1e-9)
        assert summary['anticipation_abs_dz'] == pytest.approx(0.0, abs=1e-9)
        assert summary['trim_pitch'] == pytest.approx(trim6.pitch)
        assert summary['swept_duration'] == pytest.approx(0.8 / 6.0)

    def test_unswept_gap_passage_is_flagged(self, level):
        problems = check_gap_constraints(level, TrajoptConfig())
        assert any("sweep below" in p for p in problems)
        assert any("sweep command" in p for p in problems)

    def test_swept_gap_passage_passes(self, level):
        states, inputs = level.states.copy(), level.inputs.copy()
        gap = level.phase_mask(Phase.GAP_PASSAGE)
        states[gap, XW] = 1.0
        inputs[gap, UW] = 1.0
        swept = PhasedTrajectory(times=level.times, states=states, inputs=inputs, phases=level.phases,
                                 phase_times=level.phase_times, scenario=level.scenario)
        assert check_gap_constraints(swept, TrajoptConfig()) == []


class TestTranscription:
    def test_layout_and_bounds(self, params, scenario6, trim6):
        nodes = (8, 9, 8, 8)
        problem = build_multiphase_problem(scenario6, params, nodes)
        layout = problem.meta['layout']
        assert problem.n == layout.size == 3 * (8 * 13 + 1) + 9 * 13 + 1
        start = layout.state_index(0, 0, np.arange(NX))
        np.testing.assert_array_equal(problem.lower[start], problem.upper[start])
        interior = layout.state_index(1, np.arange(1, 8), X)
        assert np.all(problem.lower[interior] == pytest.approx(scenario6.anticipation_end_x))
        assert np.all(problem.upper[interior] == pytest.approx(scenario6.gap_exit_x))
        assert np.all(problem.x0 >= problem.lower - 1e-9) and np.all(problem.x0 <= problem.upper + 1e-9)

    def test_threshold_edges_come_from_equalities_only(self, params, scenario6):
        problem = build_multiphase_problem(scenario6, params, (8, 9, 8, 8))
        layout = problem.meta['layout']
        edges = layout.state_index(1, np.array([0, 8]), X)
        assert np.all(np.isinf(problem.lower[edges])) and np.all(np.isinf(problem.upper[edges]))

    def test_swept_command_fixed_at_phase_boundaries(self, params, scenario6):
        problem = build_multiphase_problem(scenario6, params, (8, 9, 8, 8))
        layout = problem.meta['layout']
        for p, k in ((0, 7), (1, 0), (1, 8), (2, 0)):
            idx = layout.input_index(p, k, UW)
            assert problem.lower[idx] == problem.upper[idx] == 1.0
        assert problem.lower[layout.input_index(2, 1, UW)] == 0.0

    @pytest.mark.parametrize("requested, used, gap_node", [((8, 8, 8, 8), 9, 4), ((20, 12, 20, 8), 13, 6)])
    def test_even_gap_phase_is_made_odd(self, params, scenario6, requested, used, gap_node):
        problem = build_multiphase_problem(scenario6, params, requested)
        assert problem.meta['layout'].nodes[1] == used
        assert problem.meta['transcription'].gap_node == gap_node
        assert 2 * gap_node == used - 1

    def test_initial_guess_follows_sweep_dynamics(self, params, scenario6):
        problem = build_multiphase_problem(scenario6, params, (20, 13, 20, 8))
        layout = problem.meta['layout']
        defects = problem.eq(problem.x0)
        row = 0
        for n in layout.nodes:
            block = defects[row:row + (n - 1) * NX].reshape(n - 1, NX)
            assert np.abs(block[:, [XW, XWDOT]]).max() < 0.05
            row += (n - 1) * NX
        gap_sweep = problem.x0[layout.state_index(1, np.arange(13), XW)]
        assert gap_sweep.min() >= TrajoptConfig().gap_sweep_min

    def test_constraint_jacobian_directional_derivative(self, params, scenario6, rng):
        problem = build_multiphase_problem(scenario6, params, (8, 9, 8, 8))
        x = problem.x0
        jac = problem.eq_jacobian(x)
        assert jac.shape == (problem.eq(x).size, problem.n)
        d = rng.standard_normal(problem.n)
        eps = 1e-6
        fd = (problem.eq(x + eps * d) - problem.eq(x - eps * d)) / (2 * eps)
        np.testing.assert_allclose(jac @ d, fd, atol=1e-4 * (1 + np.abs(fd).max()))

    def test_too_few_nodes(self, params, scenario6):
        with pytest.raises(DomainError):
            build_multiphase_problem(scenario6, params, (4, 8, 8, 8))


@pytest.mark.slow
class TestSolvedReference:
    def test_constraints_hold(self, reference6):
        assert check_gap_constraints(reference6, TrajoptConfig()) == []
        gap = reference6.phase_mask(Phase.GAP_PASSAGE)
        assert np.all(reference6.states[gap, XW] >= 0.95 - 1e-6)
        assert reference6.meta['max_defect'] < TrajoptConfig().defect_tolerance

    def test_starts_at_trim(self, reference6, trim6):
        np.testing.assert_allclose(reference6.states[0], trim6.state, atol=1e-8)

    def test_gap_altitude(self, reference6):
        gap = np.flatnonzero(reference6.phase_mask(Phase.GAP_PASSAGE))
        node = gap[(reference6.meta["nodes_per_phase"][1] - 1) // 2]
        assert reference6.states[node, X] == pytest.approx(reference6.scenario.gap_x, abs=1e-6)
        assert abs(reference6.states[node, Z] - reference6.scenario.gap_center_z) < 1e-4

    def test_small_altitude_variation_ahead_of_gap(self, reference6):
        assert trajectory_summary(reference6)['anticipation_abs_dz'] < 0.025

    def test_forward_flight_after_resampling(self, reference6):
        resampled = resample_trajectory(reference6, 1 / 30)
        assert np.all(np.diff(resampled.states[:, X]) > 0)
        assert resampled.duration == pytest.approx(reference6.duration)

    def test_pitch_up_ahead_of_gap(self, reference6):
        x = reference6.states[:, X]
        window = np.abs(x - reference6.scenario.gap_x) <= 0.5
        assert reference6.states[window, THETA].max() > reference6.states[0, THETA]

    def test_min_swept_time_passes_faster(self, params, scenario6, reference6):
        case3 = GapScenario(gap_x=scenario6.gap_x, gap_threshold=scenario6.gap_threshold,
                            initial_speed=scenario6.initial_speed, objective=3)
        traj = solve_gap_trajectory(case3, params)
        assert trajectory_summary(traj)['gap_speed'] > trajectory_summary(reference6)['gap_speed']
