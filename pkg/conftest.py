"""Shared pytest fixtures."""

import numpy as np
import pytest

from dynamics import X, solve_trim
from params import DroneParams, GapScenario
from trajopt import Phase, PhasedTrajectory, resample_trajectory


def _level_trajectory(trim, scenario, params, nodes=10):
    """Trim flight at constant altitude, tagged with the scenario's phases."""
    speed = scenario.initial_speed
    phase_times = np.concatenate([[0.0], np.array(scenario.phase_end_x) / speed])
    times, phases = [], []
    for p in Phase:
        t = np.linspace(phase_times[p - 1], phase_times[p], nodes)
        keep = t if p == Phase.STEADY else t[:-1]
        times.append(keep)
        phases.append(np.full(keep.size, int(p)))
    times, phases = np.concatenate(times), np.concatenate(phases)
    states = np.tile(trim.state, (times.size, 1))
    states[:, X] = speed * times
    inputs = np.tile(trim.input, (times.size, 1))
    frame = PhasedTrajectory(times=times, states=states, inputs=inputs, phases=phases,
                             phase_times=phase_times, scenario=scenario).to_frame()
    return PhasedTrajectory.from_frame(frame, scenario, params, phase_times=phase_times)


@pytest.fixture(scope="session")
def params():
    return DroneParams()


@pytest.fixture(scope="session")
def trim6(params):
    return solve_trim(6.0, 0.0, params)


@pytest.fixture(scope="session")
def scenario6():
    return GapScenario(gap_x=4.0, gap_threshold=0.8, initial_speed=6.0)


@pytest.fixture(scope="session")
def level6(params, trim6, scenario6):
    """Unswept trim flight through the 6 m/s scenario (node-level, with interpolants)."""
    return _level_trajectory(trim6, scenario6, params)


@pytest.fixture(scope="session")
def swept6(params, scenario6):
    """Fully swept trim flight through the 6 m/s scenario; satisfies every gap bound."""
    return _level_trajectory(solve_trim(6.0, 1.0, params), scenario6, params)


@pytest.fixture(scope="session")
def reference6(params, scenario6):
    """Solved Case-1 reference at 6 m/s (expensive; only slow tests use it)."""
    from trajopt import solve_gap_trajectory
    return solve_gap_trajectory(scenario6, params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def swept_reference(swept6):
    """Swept trim flight resampled at the controller stage step."""
    return resample_trajectory(swept6, 1 / 30)


@pytest.fixture(scope="session")
def reference6_30hz(reference6):
    return resample_trajectory(reference6, 1 / 30)
