#!/usr/bin/env python3
"""
Closed-Loop Simulation
======================

Plant propagation at a fine step with zero-order-hold inputs, a 30 Hz MPC in
the loop, motion-capture style sensing with Butterworth-filtered velocity
estimates, actuation latency and optional plant/model mismatch.

A single run is strictly sequential: sensor → estimator → controller → plant.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.signal import butter, lfilter, lfilter_zi

from dynamics import OMEGA, Q, THETA, U, W, X, XE, XW, XWDOT, Z, rk4_step, solve_trim
from errors import EndOfTrajectory, RunAborted, StallDomainError, ValidationError
from metrics import RunMetrics, compute_metrics
from mpc import MpcConfig, MpcController, model_prediction_error
from params import DroneParams, GapScenario, with_overrides
from trajopt import FRAME_COLUMNS, Phase, PhasedTrajectory
from utils import setup_logging

logger = setup_logging(__name__)

PERTURBED_PARAMETERS = ('mass', 'cd0', 'cl_alpha', 'thrust_coeff')
ACTUATOR_STATES = (OMEGA, XW, XWDOT, XE)


@dataclass
class SensorNoise:
    position: float = 1e-3
    attitude: float = math.radians(0.2)

    def __post_init__(self):
        if self.position < 0 or self.attitude < 0:
            raise ValidationError('noise', "standard deviations must be ≥ 0")


@dataclass
class RunConfig:
    """One closed-loop run; ``seed`` fixes noise, launch error and sampled mismatch."""
    scenario: GapScenario
    controller: MpcConfig = field(default_factory=MpcConfig)
    plant_dt: float = 1e-3
    control_rate: float = 30.0
    noise: SensorNoise = field(default_factory=SensorNoise)
    filter_cutoff: float = 10.0
    latency: float = 0.065
    compensate_delay: bool = True
    launch_speed_std: float = 0.0
    perturbations: Dict[str, float] = field(default_factory=dict)
    mismatch_range: float = 0.0
    abort_on_collision: bool = True
    max_time_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.control_rate > 0 or not self.plant_dt > 0:
            raise ValidationError('plant_dt', "control rate and plant step must be > 0")
        substeps = max(1, int(round(self.period / self.plant_dt)))
        # snap so the plant step divides the control period exactly
        self.plant_dt = self.period / substeps
        if self.latency < 0 or self.launch_speed_std < 0 or self.mismatch_range < 0:
            raise ValidationError('latency', "latency, launch error and mismatch range must be ≥ 0")
        if not self.filter_cutoff > 0 or self.filter_cutoff >= self.control_rate / 2:
            raise ValidationError('filter_cutoff', "must lie in (0, Nyquist)")
        unknown = set(self.perturbations) - set(PERTURBED_PARAMETERS)
        if unknown:
            raise ValidationError('perturbations', f"unknown parameters {sorted(unknown)}")

    @property
    def period(self) -> float:
        return 1.0 / self.control_rate

    @property
    def substeps(self) -> int:
        return int(round(self.period / self.plant_dt))

    def to_dict(self) -> Dict[str, Any]:
        data = {k: v for k, v in self.__dict__.items() if k not in ('scenario', 'controller', 'noise')}
        data['scenario'] = self.scenario.to_dict()
        data['noise'] = {'position': self.noise.position, 'attitude': self.noise.attitude}
        data['controller'] = dict(self.controller.__dict__)
        return data


# ==============================================================================
# --- Sensing ---
# ==============================================================================

@dataclass
class FilterState:
    """First-order Butterworth low-pass on finite differences of [x, z, θ]."""
    b: np.ndarray
    a: np.ndarray
    dt: float
    zi: Optional[np.ndarray] = None
    previous: Optional[np.ndarray] = None

    @classmethod
    def create(cls, sample_rate: float, cutoff: float) -> "FilterState":
        b, a = butter(1, cutoff, btype='low', fs=sample_rate)
        return cls(b=b, a=a, dt=1.0 / sample_rate)

    def initialize(self, measurement: np.ndarray, rates: np.ndarray) -> None:
        self.previous = np.asarray(measurement, dtype=float).copy()
        self.zi = np.outer(np.asarray(rates, dtype=float), lfilter_zi(self.b, self.a))


def sensor_and_filter(true_state, noise: SensorNoise, rng: np.random.Generator, filt: FilterState,
                      initial_rates: Optional[np.ndarray] = None) -> np.ndarray:
    """Noisy pose measurement and filtered body velocities and pitch rate.

    Actuator states (motor speed, sweep, elevator) are passed through from
    ``true_state``; callers substitute their own open-loop estimate.
    """
    s = np.asarray(true_state, dtype=float)
    measured = s[[X, Z, THETA]] + rng.normal(0.0, 1.0, 3) * np.array([noise.position, noise.position, noise.attitude])
    if filt.previous is None:
        filt.initialize(measured, np.zeros(3) if initial_rates is None else initial_rates)
    diff = (measured - filt.previous) / filt.dt
    rates = np.empty(3)
    for i in range(3):
        out, filt.zi[i] = lfilter(filt.b, filt.a, diff[i:i + 1], zi=filt.zi[i])
        rates[i] = out[0]
    filt.previous = measured

    theta = measured[2]
    x_dot, z_dot = rates[0], rates[1]
    estimate = s.copy()
    estimate[X], estimate[Z], estimate[THETA] = measured
    estimate[U] = x_dot * np.cos(theta) + z_dot * np.sin(theta)
    estimate[W] = x_dot * np.sin(theta) - z_dot * np.cos(theta)
    estimate[Q] = rates[2]
    return estimate


def inertial_rates(state: np.ndarray) -> np.ndarray:
    """[ẋ, ż, θ̇] of a state."""
    theta, u, w = state[THETA], state[U], state[W]
    return np.array([u * np.cos(theta) + w * np.sin(theta), u * np.sin(theta) - w * np.cos(theta), state[Q]])


# ==============================================================================
# --- Closed Loop ---
# ==============================================================================

@dataclass
class ClosedLoopResult:
    trajectory_log: pd.DataFrame
    controller_log: pd.DataFrame
    metrics: RunMetrics
    plant_params: DroneParams
    launch_speed: float


def sample_perturbations(run: RunConfig, rng: np.random.Generator) -> Dict[str, float]:
    factors = {name: 1.0 + rng.uniform(-run.mismatch_range, run.mismatch_range)
               for name in PERTURBED_PARAMETERS} if run.mismatch_range > 0 else {}
    factors.update(run.perturbations)
    return factors


def _phase_of(x: float, scenario: GapScenario) -> int:
    ends = scenario.phase_end_x
    return int(min(np.searchsorted(ends, x, side='right') + 1, len(Phase)))


def run_closed_loop(run: RunConfig, reference: PhasedTrajectory,
                    params: Optional[DroneParams] = None) -> ClosedLoopResult:
    """Fly one scenario against its reference; raises RunAborted with partial logs.

    ``reference`` should already be resampled at the controller stage step.
    """
    params = params or DroneParams()
    scenario = run.scenario
    noise_seq, launch_seq, mismatch_seq = np.random.SeedSequence(run.seed).spawn(3)
    noise_rng = np.random.default_rng(noise_seq)
    launch_rng = np.random.default_rng(launch_seq)
    mismatch_rng = np.random.default_rng(mismatch_seq)

    factors = sample_perturbations(run, mismatch_rng)
    plant_params = with_overrides(params, **factors) if factors else params

    trim = solve_trim(scenario.initial_speed, 0.0, params)
    launch_speed = scenario.initial_speed + (launch_rng.normal(0.0, run.launch_speed_std)
                                             if run.launch_speed_std > 0 else 0.0)
    x = trim.state.copy()
    x[[U, W]] *= launch_speed / scenario.initial_speed

    controller = MpcController(reference, params, run.controller, initial_input=trim.input,
                               compensate_delay=run.compensate_delay,
                               delay=run.latency if run.compensate_delay else 0.0)
    filt = FilterState.create(run.control_rate, run.filter_cutoff)
    applied = trim.input.copy()
    pending: deque = deque()
    actuators = x[list(ACTUATOR_STATES)].copy()
    rows: List[np.ndarray] = []
    prediction_errors: List[Dict[str, float]] = []
    previous: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def abort(reason: str, message: str) -> RunAborted:
        return RunAborted(reason, message, trajectory_log=_frame(rows), controller_log=controller.log_frame())

    t = 0.0
    t_end = run.max_time_factor * reference.duration
    while True:
        if t > t_end:
            raise abort('timeout', f"reference not completed after {t:.2f} s")
        measured = sensor_and_filter(x, run.noise, noise_rng, filt, initial_rates=inertial_rates(x))
        measured[list(ACTUATOR_STATES)] = actuators
        if previous is not None:
            prediction_errors.append(model_prediction_error(previous[0], previous[1], measured, run.period, params))
        try:
            step = controller.step(t, measured)
        except EndOfTrajectory:
            break
        pending.append((t + run.latency, step.input.copy()))

        tick_inputs = []
        for i in range(run.substeps):
            t_sub = t + i * run.plant_dt
            while pending and pending[0][0] <= t_sub + 1e-12:
                applied = pending.popleft()[1]
            tick_inputs.append(applied)
            rows.append(np.concatenate([[t_sub], x, applied, [_phase_of(x[X], scenario)]]))
            if run.abort_on_collision and scenario.in_threshold(x[X]) and x[XW] < 0.95:
                raise abort('collision', f"sweep state {x[XW]:.3f} < 0.95 at x = {x[X]:.3f} m")
            try:
                x = rk4_step(x, applied, run.plant_dt, plant_params)
            except StallDomainError as e:
                raise abort('stall', str(e)) from e
            actuators = _propagate_actuators(actuators, applied, run.plant_dt, params)
        # prediction check uses the tick-average input
        previous = (measured.copy(), np.mean(tick_inputs, axis=0))
        t += run.period

    trajectory_log = _frame(rows)
    controller_log = controller.log_frame()
    logger.info(f"✅ Run seed={run.seed} finished at t={t:.2f}s, {controller.failures} solver failures")
    metrics = compute_metrics(trajectory_log, reference, scenario, controller_log)
    if prediction_errors:
        metrics = replace(metrics,
                          mean_speed_prediction_error=float(np.mean([e['speed'] for e in prediction_errors])),
                          mean_pitch_rate_prediction_error=float(np.mean([e['pitch_rate'] for e in prediction_errors])))
    return ClosedLoopResult(trajectory_log=trajectory_log, controller_log=controller_log, metrics=metrics,
                            plant_params=plant_params, launch_speed=launch_speed)


def _frame(rows: List[np.ndarray]) -> pd.DataFrame:
    df = pd.DataFrame(np.array(rows).reshape(len(rows), len(FRAME_COLUMNS)), columns=FRAME_COLUMNS)
    df['phase'] = df['phase'].astype(int)
    return df


def _propagate_actuators(actuators: np.ndarray, inp: np.ndarray, dt: float, params: DroneParams) -> np.ndarray:
    """Open-loop RK4 of the motor, sweep and elevator sub-models."""
    motor, act = params.motor, params.sweep_actuator
    wn, zeta = act.natural_freq, act.damping_ratio
    omega_ss = motor.steady_speed(inp[0])

    def f(a):
        return np.array([(omega_ss - a[0]) / motor.time_constant, a[2],
                         wn ** 2 * (inp[2] - a[1]) - 2.0 * zeta * wn * a[2], inp[1]])

    k1 = f(actuators)
    k2 = f(actuators + 0.5 * dt * k1)
    k3 = f(actuators + 0.5 * dt * k2)
    k4 = f(actuators + dt * k3)
    return actuators + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
