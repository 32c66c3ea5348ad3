#!/usr/bin/env python3
"""
Receding-Horizon Gap-Passage MPC
================================

Nonlinear MPC tracking a uniformly resampled PhasedTrajectory. Each control
period solves a multiple-shooting problem over the remaining reference window
with a few Gauss-Newton SQP iterations, started from a rollout of the estimate
under the shifted previous plan. Stages whose reference lies inside the
gap threshold switch to the gap weights and bounds (sweep command fixed to 1,
sweep state ≥ 0.95). Measurement and actuation delay is compensated by
propagating the estimate through the known input history.
"""

import math
import time
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from dynamics import (NU, NX, Q, THETA, U, UW, W, X, XW, as_array, input_scale, integrate,
                      linearize_batch, rk4_step, state_scale)
from errors import (EndOfTrajectory, GapFlightError, InsufficientHistory, RunAborted, SolveFailed,
                    StallDomainError, ValidationError)
from optimizer import NlpProblem, NlpSettings, SolveStatus, solve_nlp
from params import DroneParams, GapScenario
from trajopt import PhasedTrajectory
from utils import setup_logging

logger = setup_logging(__name__)

INF = math.inf
CONTROLLER_LOG_COLUMNS = ['t', 'k_f', 'gap_i', 'gap_f', 'solve_ms', 'status', 'u_m', 'u_e', 'u_w']


@dataclass
class MpcConfig:
    horizon: int = 30
    stage_dt: float = 1.0 / 30.0
    q_nominal: Tuple[float, ...] = (1.0, 100.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0)
    q_gap: Tuple[float, ...] = (1.0, 1000.0, 1.0, 1.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0)
    r_nominal: Tuple[float, ...] = (0.0, 0.0, 2.0)
    r_gap: Tuple[float, ...] = (0.0, 0.0, 100.0)
    x_lower: Tuple[float, ...] = (-INF, -INF, -INF, -INF, -INF, -INF, -INF, 0.0, -INF, -1.0)
    x_upper: Tuple[float, ...] = (INF, INF, INF, INF, INF, INF, INF, 1.0, INF, 1.0)
    u_lower: Tuple[float, ...] = (0.0, -8.0, 0.0)
    u_upper: Tuple[float, ...] = (1.0, 8.0, 1.0)
    gap_sweep_min: float = 0.95
    delay: float = 0.065
    substeps: int = 2
    sqp_iterations: int = 3
    accept_feasibility: float = 1e-4
    max_failures: int = 3
    levenberg_min: float = 1e-6

    def __post_init__(self):
        for name, size in (('q_nominal', NX), ('q_gap', NX), ('r_nominal', NU), ('r_gap', NU),
                           ('x_lower', NX), ('x_upper', NX), ('u_lower', NU), ('u_upper', NU)):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != size:
                raise ValidationError(name, f"needs {size} entries")
            setattr(self, name, value)
        for name in ('q_nominal', 'q_gap', 'r_nominal', 'r_gap'):
            if min(getattr(self, name)) < 0:
                raise ValidationError(name, "weights must be non-negative")
        if not self.q_gap[1] > self.q_nominal[1]:
            raise ValidationError('q_gap', "altitude weight must exceed the nominal one")
        if self.horizon < 1 or not self.stage_dt > 0:
            raise ValidationError('horizon', "horizon ≥ 1 and stage_dt > 0 required")
        if self.delay < 0:
            raise ValidationError('delay', "must be ≥ 0")
        x_lo, x_hi = self.gap_state_bounds()
        u_lo, u_hi = self.gap_input_bounds()
        if (np.any(x_lo < np.array(self.x_lower)) or np.any(x_hi > np.array(self.x_upper)) or np.any(x_lo > x_hi)
                or np.any(u_lo < np.array(self.u_lower)) or np.any(u_hi > np.array(self.u_upper))):
            raise ValidationError('gap_sweep_min', "gap bounds must lie inside the nominal bounds")

    def gap_state_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = np.array(self.x_lower), np.array(self.x_upper)
        lo[XW], hi[XW] = self.gap_sweep_min, 1.0
        return lo, hi

    def gap_input_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = np.array(self.u_lower), np.array(self.u_upper)
        lo[UW] = hi[UW] = 1.0
        return lo, hi

    def nlp_settings(self) -> NlpSettings:
        return NlpSettings(max_iter=self.sqp_iterations, levenberg_init=1e-4, levenberg_min=self.levenberg_min,
                           restoration=False, qp_tol=1e-8, qp_max_iter=80)


@dataclass(frozen=True)
class ReferenceWindow:
    start: int
    k_f: int


@dataclass
class MpcStep:
    input: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    k_f: int
    gap: Optional[Tuple[int, int]]
    status: str
    solve_ms: float
    start: int = 0


# ==============================================================================
# --- Reference Handling ---
# ==============================================================================

def select_reference_window(reference: PhasedTrajectory, measured_x: float, horizon: int) -> ReferenceWindow:
    """Closest reference sample in x (earliest on ties) and the remaining horizon."""
    if len(reference) == 0:
        raise EndOfTrajectory("empty reference")
    start = int(np.argmin(np.abs(reference.states[:, X] - measured_x)))
    k_f = min(horizon, len(reference) - start - 1)
    if k_f < 1:
        raise EndOfTrajectory(f"reference exhausted at x = {measured_x:.3f} m")
    return ReferenceWindow(start=start, k_f=k_f)


def identify_gap_stages(reference_x: Sequence[float], scenario: GapScenario) -> Optional[Tuple[int, int]]:
    """First maximal run of stages whose reference x lies in the closed threshold interval."""
    inside = np.flatnonzero(scenario.in_threshold(np.asarray(reference_x, dtype=float)))
    if inside.size == 0:
        return None
    breaks = np.flatnonzero(np.diff(inside) > 1)
    end = inside[breaks[0]] if breaks.size else inside[-1]
    return int(inside[0]), int(end)


def delay_compensate(measured_state, input_history: Sequence[Tuple[float, np.ndarray]], delay: float,
                     params: DroneParams, now: float = 0.0, max_step: float = 1.0 / 60.0) -> np.ndarray:
    """Propagate a state measured at ``now - delay`` to ``now``.

    ``input_history`` holds (time the input took effect, input) pairs in time
    order; inputs are held between entries.
    """
    if delay < 0:
        raise ValidationError('delay', "must be ≥ 0")
    state = as_array(measured_state, NX).astype(float).copy()
    if delay == 0:
        return state
    if not input_history:
        warnings.warn("no input history; delay compensation skipped", InsufficientHistory)
        return state

    t0 = now - delay
    times = np.array([t for t, _ in input_history], dtype=float)
    if times[0] > t0 + 1e-12:
        warnings.warn(f"input history starts at {times[0]:.3f} s, needed from {t0:.3f} s; "
                      f"holding the earliest input", InsufficientHistory)
    cuts = [t0, *times[(times > t0) & (times < now)], now]
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-12:
            continue
        idx = max(int(np.searchsorted(times, a + 1e-12, side='right')) - 1, 0)
        state = integrate(state, np.asarray(input_history[idx][1], dtype=float), b - a, max_step, params)
    return state


def stage_weights(k_f: int, gap: Optional[Tuple[int, int]], config: MpcConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Per-stage state weights (k_f+1, 10) and input weights (k_f, 3)."""
    q = np.tile(config.q_nominal, (k_f + 1, 1))
    r = np.tile(config.r_nominal, (k_f, 1))
    if gap is not None:
        i, f = gap
        q[i:f + 1] = config.q_gap
        r[i:min(f + 1, k_f)] = config.r_gap
    return q, r


def stage_bounds(k_f: int, gap: Optional[Tuple[int, int]], config: MpcConfig):
    """Per-stage boxes; stage 0 states are left free here (fixed by x̂₀)."""
    x_lo = np.tile(config.x_lower, (k_f + 1, 1))
    x_hi = np.tile(config.x_upper, (k_f + 1, 1))
    u_lo = np.tile(config.u_lower, (k_f, 1))
    u_hi = np.tile(config.u_upper, (k_f, 1))
    if gap is not None:
        i, f = gap
        gx_lo, gx_hi = config.gap_state_bounds()
        gu_lo, gu_hi = config.gap_input_bounds()
        x_lo[i:f + 1], x_hi[i:f + 1] = gx_lo, gx_hi
        u_lo[i:min(f + 1, k_f)], u_hi[i:min(f + 1, k_f)] = gu_lo, gu_hi
    return x_lo, x_hi, u_lo, u_hi


# ==============================================================================
# --- Multiple-Shooting Step ---
# ==============================================================================

def _warm_guess(reference: PhasedTrajectory, window: ReferenceWindow,
                warm_start: Optional[MpcStep]) -> Tuple[np.ndarray, np.ndarray]:
    s, k_f = window.start, window.k_f
    xs = reference.states[s:s + k_f + 1].copy()
    us = reference.inputs[s:s + k_f].copy()
    if warm_start is not None:
        shift = max(s - warm_start.start, 0)
        prev_x = warm_start.states[shift:]
        prev_u = warm_start.inputs[shift:]
        nx, nu = min(len(prev_x), k_f + 1), min(len(prev_u), k_f)
        xs[:nx] = prev_x[:nx]
        us[:nu] = prev_u[:nu]
        # repeat the last planned stage
        if nx < k_f + 1 and nx > 0:
            xs[nx:] = xs[nx - 1]
        if nu < k_f and nu > 0:
            us[nu:] = us[nu - 1]
    return xs, us


def rollout_guess(x0: np.ndarray, inputs: np.ndarray, config: MpcConfig,
                  params: DroneParams) -> Optional[np.ndarray]:
    """Shooting states from x̂₀ under ``inputs``; None if the rollout leaves the model's domain."""
    xs = np.empty((len(inputs) + 1, NX))
    xs[0] = x0
    h = config.stage_dt / config.substeps
    try:
        with np.errstate(all='ignore'):
            for k, inp in enumerate(inputs):
                state = xs[k]
                for _ in range(config.substeps):
                    state = rk4_step(state, inp, h, params)
                xs[k + 1] = state
    except StallDomainError:
        return None
    return xs if np.all(np.isfinite(xs)) else None


def solve_step(x_hat0, reference: PhasedTrajectory, window: ReferenceWindow,
               gap: Optional[Tuple[int, int]], config: MpcConfig, params: DroneParams,
               warm_start: Optional[MpcStep] = None) -> MpcStep:
    """One receding-horizon solve; raises SolveFailed when no usable plan results."""
    start_time = time.perf_counter()
    x0 = as_array(x_hat0, NX).astype(float)
    k_f, s = window.k_f, window.start
    sx, su = state_scale(params), input_scale(params)
    x_ref = reference.states[s:s + k_f + 1]
    u_ref = reference.inputs[s:s + k_f]
    q, r = stage_weights(k_f, gap, config)
    sqrt_q, sqrt_r = np.sqrt(q[1:]), np.sqrt(r)
    n_x, n_u = (k_f + 1) * NX, k_f * NU
    dt, substeps = config.stage_dt, config.substeps

    def unpack(v):
        return v[:n_x].reshape(k_f + 1, NX) * sx, v[n_x:].reshape(k_f, NU) * su

    def residuals(v):
        xs, us = unpack(v)
        return np.concatenate([(sqrt_q * (xs[1:] - x_ref[1:])).ravel(), (sqrt_r * (us - u_ref)).ravel()])

    jac_r = sp.diags(np.concatenate([(sqrt_q * sx).ravel(), (sqrt_r * su).ravel()]))
    jac_r = sp.hstack([sp.csr_matrix((jac_r.shape[0], NX)), jac_r]).tocsr()

    def residual_jacobian(v):
        return jac_r

    def propagate(xs, us):
        out = xs[:-1]
        for _ in range(substeps):
            out = rk4_step(out, us, dt / substeps, params)
        return out

    def eq(v):
        xs, us = unpack(v)
        return ((xs[1:] - propagate(xs, us)) / sx).ravel()

    k_idx = np.arange(k_f)
    rows_x = (k_idx[:, None, None] * NX + np.arange(NX)[None, :, None])

    def eq_jacobian(v):
        xs, us = unpack(v)
        A, B = linearize_batch(xs[:-1], us, params, discrete=True, dt=dt, substeps=substeps)
        A = -A * sx[None, None, :] / sx[None, :, None]
        B = -B * su[None, None, :] / sx[None, :, None]
        cols_a = k_idx[:, None, None] * NX + np.arange(NX)[None, None, :]
        cols_b = n_x + k_idx[:, None, None] * NU + np.arange(NU)[None, None, :]
        diag_r = np.arange(k_f * NX)
        rows = np.concatenate([np.broadcast_to(rows_x, A.shape).ravel(),
                               np.broadcast_to(rows_x, B.shape).ravel(), diag_r])
        cols = np.concatenate([np.broadcast_to(cols_a, A.shape).ravel(),
                               np.broadcast_to(cols_b, B.shape).ravel(), diag_r + NX])
        vals = np.concatenate([A.ravel(), B.ravel(), np.ones(k_f * NX)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(k_f * NX, n_x + n_u))

    x_lo, x_hi, u_lo, u_hi = stage_bounds(k_f, gap, config)
    x_lo[0] = x_hi[0] = x0
    lower = np.concatenate([(x_lo / sx).ravel(), (u_lo / su).ravel()])
    upper = np.concatenate([(x_hi / sx).ravel(), (u_hi / su).ravel()])

    xs_guess, us_guess = _warm_guess(reference, window, warm_start)
    us_guess = np.clip(us_guess, u_lo, u_hi)
    rolled = rollout_guess(x0, us_guess, config, params)
    if rolled is not None:
        xs_guess = rolled
    xs_guess[0] = x0
    guess = np.concatenate([(xs_guess / sx).ravel(), (us_guess / su).ravel()])

    problem = NlpProblem(n=n_x + n_u, x0=np.clip(guess, lower, upper), residuals=residuals,
                         residual_jacobian=residual_jacobian, eq=eq, eq_jacobian=eq_jacobian,
                         lower=lower, upper=upper, name=f"mpc-{s}")
    solution = solve_nlp(problem, config.nlp_settings())
    solve_ms = 1e3 * (time.perf_counter() - start_time)

    # an unfinished solve is usable once a step was accepted or the plan is feasible
    accepted = solution.status is SolveStatus.CONVERGED or (
        solution.status is SolveStatus.MAX_ITER
        and (bool(solution.merit_history) or solution.feasibility <= config.accept_feasibility))
    if not accepted:
        raise SolveFailed(f"MPC step at reference index {s}: {solution.status.value} "
                          f"(feasibility {solution.feasibility:.2e}, {solution.message})",
                          status=solution.status.value)
    xs, us = unpack(solution.x)
    return MpcStep(input=us[0].copy(), states=xs, inputs=us, k_f=k_f, gap=gap,
                   status=solution.status.value, solve_ms=solve_ms, start=s)


def model_prediction_error(state, inp, next_state, dt: float, params: DroneParams) -> Dict[str, float]:
    """One-step model prediction minus measurement for airspeed and pitch rate."""
    predicted = rk4_step(as_array(state, NX), as_array(inp, NU), dt, params, strict=False)
    measured = as_array(next_state, NX)
    return {'speed': float(np.hypot(predicted[U], predicted[W]) - np.hypot(measured[U], measured[W])),
            'pitch_rate': float(predicted[Q] - measured[Q]),
            'pitch': float(predicted[THETA] - measured[THETA])}


# ==============================================================================
# --- Controller State Machine ---
# ==============================================================================

class MpcController:
    """Serial controller: delay compensation, window selection, solve and fallback.

    ``step`` must be called once per control period with increasing time.
    """

    def __init__(self, reference: PhasedTrajectory, params: DroneParams, config: Optional[MpcConfig] = None,
                 initial_input: Optional[np.ndarray] = None, compensate_delay: bool = True,
                 delay: Optional[float] = None):
        self.logger = setup_logging(self.__class__.__name__)
        self.reference = reference
        self.params = params
        self.config = config or MpcConfig()
        self.delay = self.config.delay if delay is None else delay
        self.compensate_delay = compensate_delay
        start_input = reference.inputs[0] if initial_input is None else initial_input
        self.last_input = np.asarray(start_input, dtype=float).copy()
        self.history: List[Tuple[float, np.ndarray]] = [(-INF, self.last_input.copy())]
        self.last_step: Optional[MpcStep] = None
        self.consecutive_failures = 0
        self.failures = 0
        self.rows: List[Dict[str, float]] = []

    def estimate(self, t: float, measured_state) -> np.ndarray:
        if not self.compensate_delay or self.delay == 0:
            return as_array(measured_state, NX).astype(float)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always', InsufficientHistory)
            state = delay_compensate(measured_state, self.history, self.delay, self.params, now=t + self.delay)
        for w in caught:
            self.logger.warning(f"⚠️ {w.message}")
        return state

    def step(self, t: float, measured_state) -> MpcStep:
        """Compute the input to apply; raises EndOfTrajectory when the reference is exhausted."""
        x_hat = self.estimate(t, measured_state)
        window = select_reference_window(self.reference, x_hat[X], self.config.horizon)
        ref_x = self.reference.states[window.start:window.start + window.k_f + 1, X]
        gap = identify_gap_stages(ref_x, self.reference.scenario)
        try:
            step = solve_step(x_hat, self.reference, window, gap, self.config, self.params, self.last_step)
            self.consecutive_failures = 0
            self.last_step = step
        except GapFlightError as e:
            self.failures += 1
            self.consecutive_failures += 1
            self.logger.warning(f"⚠️ t={t:.3f}s solver failure {self.consecutive_failures}: {e}")
            if self.consecutive_failures >= self.config.max_failures:
                raise RunAborted('solver', f"{self.consecutive_failures} consecutive MPC failures at t={t:.3f}s",
                                 controller_log=self.log_frame()) from e
            step = MpcStep(input=self.last_input.copy(), states=x_hat[None], inputs=self.last_input[None],
                           k_f=window.k_f, gap=gap, status="HoldLast", solve_ms=float('nan'),
                           start=window.start)
            self.last_step = None
        self.last_input = step.input.copy()
        self.history.append((t + self.delay, step.input.copy()))
        self.rows.append({'t': t, 'k_f': step.k_f,
                          'gap_i': step.gap[0] if step.gap else -1,
                          'gap_f': step.gap[1] if step.gap else -1,
                          'solve_ms': step.solve_ms, 'status': step.status,
                          'u_m': step.input[0], 'u_e': step.input[1], 'u_w': step.input[2]})
        return step

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=CONTROLLER_LOG_COLUMNS)
