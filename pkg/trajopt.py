#!/usr/bin/env python3
"""
Gap-Passage Trajectory Optimization
===================================

Four-phase optimal control problem (anticipation, gap passage, recovery,
steady flight) transcribed with compressed Hermite-Simpson collocation and
free phase durations, solved with the SQP in ``optimizer.py``.

Decision vector, per phase p with n_p nodes (all scaled by
``dynamics.state_scale`` / ``dynamics.input_scale``):

    [ X_p (n_p × 10) | U_p (n_p × 3) | T_p ]
"""

import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.interpolate import CubicHermiteSpline
from scipy.signal import StateSpace, lsim

from config import TrajoptConfig
from dynamics import (INPUT_NAMES, NU, NX, OMEGA, Q, STATE_NAMES, THETA, U, UM, UW, X, XE, XW, XWDOT, Z,
                      _perturbations, input_scale, solve_trim, state_derivative,
                      state_scale)
from errors import DefectTooLarge, DomainError, NoTrimFound, SolveFailed
from optimizer import NlpProblem, NlpSettings, SolveStatus, solve_nlp
from params import DroneParams, GapScenario, ObjectiveCase
from utils import setup_logging

logger = setup_logging(__name__)

FRAME_COLUMNS = ['t', *STATE_NAMES, *INPUT_NAMES, 'phase']


class Phase(IntEnum):
    ANTICIPATION = 1
    GAP_PASSAGE = 2
    RECOVERY = 3
    STEADY = 4


# ==============================================================================
# --- Trajectory Container ---
# ==============================================================================

@dataclass
class PhaseSegment:
    """Node values of one phase with the cubic Hermite collocation interpolant."""
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    spline: CubicHermiteSpline

    def state_at(self, t) -> np.ndarray:
        return self.spline(np.clip(t, self.times[0], self.times[-1]))

    def input_at(self, t) -> np.ndarray:
        t = np.atleast_1d(t)
        return np.stack([np.interp(t, self.times, self.inputs[:, j]) for j in range(NU)], axis=-1)


def _segments(times: np.ndarray, states: np.ndarray, inputs: np.ndarray, phases: np.ndarray,
              params: DroneParams) -> List[PhaseSegment]:
    """Rebuild per-phase interpolants; each phase ends at the next phase's first sample."""
    segments = []
    for phase in Phase:
        idx = np.flatnonzero(phases == phase)
        if idx.size == 0:
            raise DomainError(f"trajectory has no {phase.name} samples")
        if idx[-1] + 1 < times.size:
            idx = np.append(idx, idx[-1] + 1)
        t, s, u = times[idx], states[idx], inputs[idx]
        # inputs are continuous across phase boundaries, so the boundary derivative
        # is evaluated with this phase's last input
        derivs = state_derivative(s, u, params, strict=False)
        segments.append(PhaseSegment(times=t, states=s, inputs=u, spline=CubicHermiteSpline(t, s, derivs)))
    return segments


@dataclass
class PhasedTrajectory:
    """Time-ordered samples tagged with their phase.

    ``phase_times`` holds t₀..t₄. Node-level trajectories keep the collocation
    interpolants so they can be evaluated anywhere with ``sample``.
    """
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    phases: np.ndarray
    phase_times: np.ndarray
    scenario: GapScenario
    objective: float = float('nan')
    segments: Optional[List[PhaseSegment]] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.phases = np.asarray(self.phases, dtype=int)
        self.phase_times = np.asarray(self.phase_times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("trajectory times must be strictly increasing")
        if np.any(np.diff(self.phases) < 0) or np.any(np.diff(self.phases) > 1):
            raise DomainError("phases must be contiguous and ordered")

    def __len__(self) -> int:
        return self.times.size

    @property
    def duration(self) -> float:
        return float(self.phase_times[-1] - self.phase_times[0])

    @property
    def phase_durations(self) -> np.ndarray:
        return np.diff(self.phase_times)

    def phase_mask(self, phase: Phase) -> np.ndarray:
        return self.phases == int(phase)

    def phase_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.phase_times[1:-1], t, side='right') + 1
        return idx

    def sample(self, t) -> Tuple[np.ndarray, np.ndarray]:
        """States (K, 10) and inputs (K, 3) at times ``t`` from the collocation interpolant."""
        if self.segments is None:
            raise DomainError("trajectory has no interpolants; build it with params")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        states = np.empty((t.size, NX))
        inputs = np.empty((t.size, NU))
        for phase, segment in zip(Phase, self.segments):
            mask = self.phase_at(t) == int(phase)
            if np.any(mask):
                states[mask] = segment.state_at(t[mask])
                inputs[mask] = segment.input_at(t[mask])
        return states, inputs

    def to_frame(self) -> pd.DataFrame:
        data = np.column_stack([self.times, self.states, self.inputs, self.phases])
        df = pd.DataFrame(data, columns=FRAME_COLUMNS)
        df['phase'] = df['phase'].astype(int)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, scenario: GapScenario, params: Optional[DroneParams] = None,
                   phase_times: Optional[Sequence[float]] = None, objective: float = float('nan')
                   ) -> "PhasedTrajectory":
        missing = [c for c in FRAME_COLUMNS if c not in df.columns]
        if missing:
            raise DomainError(f"trajectory frame missing columns: {missing}")
        times = df['t'].to_numpy(dtype=float)
        states = df[list(STATE_NAMES)].to_numpy(dtype=float)
        inputs = df[list(INPUT_NAMES)].to_numpy(dtype=float)
        phases = df['phase'].to_numpy(dtype=int)
        if phase_times is None:
            starts = [times[np.argmax(phases == p)] for p in Phase]
            phase_times = [*starts, times[-1]]
        segments = _segments(times, states, inputs, phases, params) if params is not None else None
        return cls(times=times, states=states, inputs=inputs, phases=phases,
                   phase_times=np.asarray(phase_times), scenario=scenario,
                   objective=objective, segments=segments)


# ==============================================================================
# --- Objectives ---
# ==============================================================================

@dataclass(frozen=True)
class CostTerm:
    """One objective contribution.

    ``integral`` terms are weight·∫(s[index] − target)² dt over all phases;
    ``duration`` terms are weight·(sum of the listed phase durations).
    """
    name: str
    kind: str
    weight: float = 1.0
    index: Optional[int] = None
    target: str = ''
    phases: Tuple[Phase, ...] = tuple(Phase)

    def reference(self, scenario: GapScenario) -> float:
        if self.target == 'gap_altitude':
            return scenario.gap_center_z
        if self.target == 'initial_speed':
            return scenario.initial_speed
        return 0.0


def objective_terms(case, case3_regularizer: float = 1e-4) -> List[CostTerm]:
    """Cost terms of the three gap-passage objectives."""
    case = ObjectiveCase.parse(case)
    altitude = CostTerm('altitude_variation', 'integral', 1.0, Z, 'gap_altitude')
    if case is ObjectiveCase.MIN_ALTITUDE_VARIATION:
        return [altitude]
    if case is ObjectiveCase.MIN_SPEED_VARIATION:
        return [CostTerm('speed_variation', 'integral', 1.0, U, 'initial_speed')]
    return [CostTerm('swept_time', 'duration', 1.0, phases=(Phase.GAP_PASSAGE,)),
            CostTerm('altitude_regularizer', 'integral', case3_regularizer, Z, 'gap_altitude')]


def evaluate_cost(terms: Sequence[CostTerm], traj: PhasedTrajectory) -> float:
    """Objective value of a trajectory by trapezoidal quadrature over its samples."""
    total = 0.0
    for term in terms:
        if term.kind == 'duration':
            total += term.weight * sum(traj.phase_durations[int(p) - 1] for p in term.phases)
        else:
            err = traj.states[:, term.index] - term.reference(traj.scenario)
            total += term.weight * float(trapezoid(err ** 2, traj.times))
    return total


# ==============================================================================
# --- Transcription ---
# ==============================================================================

@dataclass(frozen=True)
class TranscriptionLayout:
    nodes: Tuple[int, ...]

    @property
    def offsets(self) -> Tuple[int, ...]:
        sizes = [n * (NX + NU) + 1 for n in self.nodes]
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]]))

    @property
    def size(self) -> int:
        return sum(n * (NX + NU) + 1 for n in self.nodes)

    def state_index(self, p: int, k, i) -> Any:
        return self.offsets[p] + np.asarray(k) * NX + np.asarray(i)

    def input_index(self, p: int, k, j) -> Any:
        return self.offsets[p] + self.nodes[p] * NX + np.asarray(k) * NU + np.asarray(j)

    def duration_index(self, p: int) -> int:
        return self.offsets[p] + self.nodes[p] * (NX + NU)

    def unpack(self, v: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray, float]:
        n, o = self.nodes[p], self.offsets[p]
        xs = v[o:o + n * NX].reshape(n, NX)
        us = v[o + n * NX:o + n * (NX + NU)].reshape(n, NU)
        return xs, us, float(v[o + n * (NX + NU)])


class _Transcription:
    """Constraint and cost callbacks of one multi-phase problem."""

    def __init__(self, scenario: GapScenario, params: DroneParams, layout: TranscriptionLayout,
                 settings: TrajoptConfig, initial_state: np.ndarray):
        self.logger = setup_logging(self.__class__.__name__)
        self.scenario = scenario
        self.params = params
        self.layout = layout
        self.settings = settings
        self.initial_state = initial_state
        self.sx = state_scale(params)
        self.su = input_scale(params)
        self.terms = objective_terms(scenario.objective, settings.case3_regularizer)
        self.gap_node = (layout.nodes[1] - 1) // 2
        self._linear_rows, self._linear_cols, self._linear_vals, self._linear_rhs = self._linear_constraints()
        self._n_defects = sum((n - 1) * NX for n in layout.nodes)
        self.n_eq = self._n_defects + (NX - 1) + len(self._linear_rhs)

    # -- Hermite-Simpson defects -----------------------------------------------

    def _defect(self, local: np.ndarray, n: int) -> np.ndarray:
        """Scaled defect for local variables [x_k, u_k, x_k+1, u_k+1, T] (..., 27)."""
        sx, su = self.sx, self.su
        xk = local[..., :NX] * sx
        uk = local[..., NX:NX + NU] * su
        xk1 = local[..., NX + NU:2 * NX + NU] * sx
        uk1 = local[..., 2 * NX + NU:2 * (NX + NU)] * su
        h = local[..., -1:] / (n - 1)
        fk = state_derivative(xk, uk, self.params)
        fk1 = state_derivative(xk1, uk1, self.params)
        xc = 0.5 * (xk + xk1) + h / 8.0 * (fk - fk1)
        fc = state_derivative(xc, 0.5 * (uk + uk1), self.params)
        return (xk1 - xk - h / 6.0 * (fk + 4.0 * fc + fk1)) / sx

    def _interval_locals(self, v: np.ndarray, p: int) -> np.ndarray:
        xs, us, T = self.layout.unpack(v, p)
        n = xs.shape[0]
        return np.concatenate([xs[:-1], us[:-1], xs[1:], us[1:], np.full((n - 1, 1), T)], axis=1)

    def _interval_columns(self, p: int) -> np.ndarray:
        n = self.layout.nodes[p]
        k = np.arange(n - 1)[:, None]
        cols = np.concatenate([
            self.layout.state_index(p, k, np.arange(NX)),
            self.layout.input_index(p, k, np.arange(NU)),
            self.layout.state_index(p, k + 1, np.arange(NX)),
            self.layout.input_index(p, k + 1, np.arange(NU)),
            np.full((n - 1, 1), self.layout.duration_index(p)),
        ], axis=1)
        return cols

    def _steady_residual(self, local: np.ndarray) -> np.ndarray:
        x = local[..., :NX] * self.sx
        u = local[..., NX:] * self.su
        return (state_derivative(x, u, self.params) / self.sx)[..., 1:]

    # -- linear equalities -----------------------------------------------------

    def _linear_constraints(self):
        """Linkage, phase-end positions, gap point and constant steady inputs as A v = b."""
        lay, sx, su = self.layout, self.sx, self.su
        rows, cols, vals, rhs = [], [], [], []

        def add(entries: Sequence[Tuple[int, float]], b: float):
            r = len(rhs)
            for c, a in entries:
                rows.append(r); cols.append(int(c)); vals.append(a)
            rhs.append(b)

        for p in range(3):
            last = lay.nodes[p] - 1
            for i in range(NX):
                add([(lay.state_index(p + 1, 0, i), 1.0), (lay.state_index(p, last, i), -1.0)], 0.0)
            for j in range(NU):
                if j == UW and p in (0, 1):
                    continue  # both sides fixed to the swept command in bounds()
                add([(lay.input_index(p + 1, 0, j), 1.0), (lay.input_index(p, last, j), -1.0)], 0.0)
        for p, end_x in enumerate(self.scenario.phase_end_x):
            add([(lay.state_index(p, lay.nodes[p] - 1, X), sx[X])], end_x)
        add([(lay.state_index(1, self.gap_node, X), sx[X])], self.scenario.gap_x)
        gap_nodes = range(lay.nodes[1]) if self.settings.strict_gap_altitude else [self.gap_node]
        for k in gap_nodes:
            add([(lay.state_index(1, k, Z), sx[Z])], self.scenario.gap_center_z)
        add([(lay.state_index(3, 0, Z), sx[Z])], self.scenario.gap_center_z)
        for k in range(1, lay.nodes[3]):
            for j in range(NU):
                add([(lay.input_index(3, k, j), su[j]), (lay.input_index(3, 0, j), -su[j])], 0.0)
        return np.array(rows), np.array(cols), np.array(vals), np.array(rhs)

    # -- NLP callbacks ---------------------------------------------------------

    def eq(self, v: np.ndarray) -> np.ndarray:
        parts = []
        for p, n in enumerate(self.layout.nodes):
            parts.append(self._defect(self._interval_locals(v, p), n).ravel())
        parts.append(self._steady_residual(self._steady_locals(v)))
        A = sp.csr_matrix((self._linear_vals, (self._linear_rows, self._linear_cols)),
                          shape=(len(self._linear_rhs), v.size))
        parts.append(A @ v - self._linear_rhs)
        return np.concatenate(parts)

    def _steady_locals(self, v: np.ndarray) -> np.ndarray:
        xs, us, _ = self.layout.unpack(v, 3)
        return np.concatenate([xs[0], us[0]])

    def eq_jacobian(self, v: np.ndarray, eps: float = 1e-6) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        row0 = 0
        for p, n in enumerate(self.layout.nodes):
            local = self._interval_locals(v, p)
            batch, h = _perturbations(local, eps)
            values = self._defect(batch, n)
            m = local.shape[1]
            jac = (values[:, :m] - values[:, m:]) / (2.0 * h[:, :, None])   # (K, 27, 10)
            jac = np.swapaxes(jac, 1, 2)                                    # (K, 10, 27)
            local_cols = self._interval_columns(p)
            r = row0 + np.arange((n - 1) * NX).reshape(n - 1, NX)
            rows.append(np.broadcast_to(r[:, :, None], jac.shape).ravel())
            cols.append(np.broadcast_to(local_cols[:, None, :], jac.shape).ravel())
            vals.append(jac.ravel())
            row0 += (n - 1) * NX

        local = self._steady_locals(v)
        batch, h = _perturbations(local, eps)
        values = self._steady_residual(batch)
        m = local.size
        jac = ((values[:m] - values[m:]) / (2.0 * h[:, None])).T             # (9, 13)
        steady_cols = np.concatenate([self.layout.state_index(3, 0, np.arange(NX)),
                                      self.layout.input_index(3, 0, np.arange(NU))])
        rows.append(np.repeat(row0 + np.arange(NX - 1), m))
        cols.append(np.tile(steady_cols, NX - 1))
        vals.append(jac.ravel())
        row0 += NX - 1

        rows.append(row0 + self._linear_rows)
        cols.append(self._linear_cols)
        vals.append(self._linear_vals)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_eq, v.size))

    def _quadrature(self, n: int) -> np.ndarray:
        w = np.ones(n) / (n - 1)
        w[[0, -1]] *= 0.5
        return w

    def residuals(self, v: np.ndarray) -> np.ndarray:
        return self._residuals_and_jacobian(v)[0]

    def residual_jacobian(self, v: np.ndarray) -> sp.csr_matrix:
        return self._residuals_and_jacobian(v)[1]

    def _residuals_and_jacobian(self, v: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        """Least-squares residuals: trapezoidal integral terms plus input-rate smoothing."""
        lay = self.layout
        res, rows, cols, vals = [], [], [], []
        r0 = 0
        for term in self.terms:
            if term.kind != 'integral':
                continue
            ref = term.reference(self.scenario)
            for p, n in enumerate(lay.nodes):
                xs, _, T = lay.unpack(v, p)
                c = term.weight * self._quadrature(n)
                err = xs[:, term.index] * self.sx[term.index] - ref
                root_T = np.sqrt(max(T, 1e-12))
                res.append(np.sqrt(c) * root_T * err)
                k = np.arange(n)
                rows += [r0 + k, r0 + k]
                cols += [lay.state_index(p, k, term.index), np.full(n, lay.duration_index(p))]
                vals += [np.sqrt(c) * root_T * self.sx[term.index], np.sqrt(c) * err / (2.0 * root_T)]
                r0 += n
        weight = np.sqrt(self.settings.input_regularizer)
        for p, n in enumerate(lay.nodes):
            _, us, _ = lay.unpack(v, p)
            res.append((weight * (us[1:] - us[:-1])).ravel())
            k = np.repeat(np.arange(n - 1), NU)
            j = np.tile(np.arange(NU), n - 1)
            r = r0 + np.arange((n - 1) * NU)
            rows += [r, r]
            cols += [lay.input_index(p, k + 1, j), lay.input_index(p, k, j)]
            vals += [np.full(r.size, weight), np.full(r.size, -weight)]
            r0 += r.size
        jac = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(r0, v.size))
        return np.concatenate(res), jac

    def objective(self, v: np.ndarray) -> float:
        return sum(term.weight * sum(v[self.layout.duration_index(int(p) - 1)] for p in term.phases)
                   for term in self.terms if term.kind == 'duration')

    def gradient(self, v: np.ndarray) -> np.ndarray:
        grad = np.zeros(v.size)
        for term in self.terms:
            if term.kind == 'duration':
                for p in term.phases:
                    grad[self.layout.duration_index(int(p) - 1)] += term.weight
        return grad

    # -- bounds ----------------------------------------------------------------

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lay, sx, su = self.layout, self.sx, self.su
        params, settings = self.params, self.settings
        lower = np.full(lay.size, -np.inf)
        upper = np.full(lay.size, np.inf)

        def box(idx, lo, hi, scale):
            lower[idx] = lo / scale
            upper[idx] = hi / scale

        rate = params.elevator.rate_limit
        for p, n in enumerate(lay.nodes):
            k = np.arange(n)
            box(lay.input_index(p, k, 0), 0.0, 1.0, su[0])
            box(lay.input_index(p, k, 1), -rate, rate, su[1])
            box(lay.input_index(p, k, 2), 0.0, 1.0, su[2])
            box(lay.state_index(p, k, XW), 0.0, 1.0, sx[XW])
            box(lay.state_index(p, k, XE), -1.0, 1.0, sx[XE])
            box(lay.state_index(p, k, OMEGA), 0.0, np.inf, sx[OMEGA])
            d = lay.duration_index(p)
            lower[d], upper[d] = settings.min_phase_duration, settings.max_phase_duration

        # end nodes of Phase 2 are already pinned to the threshold edges by equalities
        interior = np.arange(1, lay.nodes[1] - 1)
        box(lay.state_index(1, interior, X), self.scenario.anticipation_end_x, self.scenario.gap_exit_x, sx[X])
        k = np.arange(lay.nodes[1])
        box(lay.state_index(1, k, XW), settings.gap_sweep_min, 1.0, sx[XW])
        box(lay.input_index(1, k, UW), 1.0, 1.0, su[UW])
        box(lay.input_index(0, lay.nodes[0] - 1, UW), 1.0, 1.0, su[UW])
        box(lay.input_index(2, 0, UW), 1.0, 1.0, su[UW])
        if settings.max_gap_pitch is not None:
            box(lay.state_index(1, k, THETA), -settings.max_gap_pitch, settings.max_gap_pitch, sx[THETA])

        start = lay.state_index(0, 0, np.arange(NX))
        lower[start] = upper[start] = self.initial_state / sx
        return lower, upper

    # -- initial guess -----------------------------------------------------------

    def initial_guess(self, trim_input: np.ndarray) -> np.ndarray:
        """Constant-speed pass with the sweep actuator response to a command held over Phase 2.

        Attitude, body velocities, motor speed, elevator state and throttle blend
        between the unswept and swept trims with the simulated sweep state.
        """
        lay, scenario, params = self.layout, self.scenario, self.params
        speed = scenario.initial_speed
        starts = np.concatenate([[0.0], scenario.phase_end_x[:-1]])
        durations = (np.array(scenario.phase_end_x) - starts) / speed
        phase_times = np.concatenate([[0.0], np.cumsum(durations)])
        node_times = [phase_times[p] + np.linspace(0.0, durations[p], n) for p, n in enumerate(lay.nodes)]
        sweep_on = phase_times[1] - 1.5 * params.sweep_travel_time
        commands = [(node_times[0] >= sweep_on).astype(float), np.ones(lay.nodes[1]),
                    (np.arange(lay.nodes[2]) == 0).astype(float), np.zeros(lay.nodes[3])]

        # boundary nodes are shared and carry equal commands
        knot_t = np.concatenate([t[:-1] for t in node_times[:-1]] + [node_times[-1]])
        knot_u = np.concatenate([c[:-1] for c in commands[:-1]] + [commands[-1]])
        fine = np.linspace(0.0, phase_times[-1], 4000)
        sweep = self._sweep_response(fine, np.interp(fine, knot_t, knot_u))

        swept_state, swept_input = self._swept_trim(trim_input)
        w = np.clip(sweep[:, 0], 0.0, 1.0)[:, None]
        profile = (1.0 - w) * self.initial_state + w * swept_state
        profile[:, XW], profile[:, XWDOT] = sweep[:, 0], sweep[:, 1]
        profile[:, Q] = np.gradient(profile[:, THETA], fine)
        rate = params.elevator.rate_limit
        elevator_rate = np.clip(np.gradient(profile[:, XE], fine), -rate, rate)
        throttle = (1.0 - w[:, 0]) * trim_input[UM] + w[:, 0] * swept_input[UM]

        v = np.zeros(lay.size)
        for p, n in enumerate(lay.nodes):
            t = node_times[p]
            xs = np.stack([np.interp(t, fine, profile[:, i]) for i in range(NX)], axis=1)
            xs[:, X] = speed * t
            if p == 0:
                xs[:, Z] = np.interp(t, [0.0, durations[0]], [self.initial_state[Z], scenario.gap_center_z])
            else:
                xs[:, Z] = scenario.gap_center_z
            us = np.column_stack([np.interp(t, fine, throttle), np.interp(t, fine, elevator_rate), commands[p]])
            o = lay.offsets[p]
            v[o:o + n * NX] = (xs / self.sx).ravel()
            v[o + n * NX:o + n * (NX + NU)] = (us / self.su).ravel()
            v[lay.duration_index(p)] = durations[p]
        return v

    def _sweep_response(self, t: np.ndarray, command: np.ndarray) -> np.ndarray:
        """[x_w, ẋ_w] of the second-order sweep actuator under ``command`` (len(t), 2)."""
        act = self.params.sweep_actuator
        wn, zeta = act.natural_freq, act.damping_ratio
        system = StateSpace([[0.0, 1.0], [-wn ** 2, -2.0 * zeta * wn]], [[0.0], [wn ** 2]],
                            np.eye(2), np.zeros((2, 1)))
        _, _, states = lsim(system, U=command, T=t, X0=self.initial_state[[XW, XWDOT]])
        return np.asarray(states).reshape(t.size, 2)

    def _swept_trim(self, trim_input: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        try:
            swept = solve_trim(self.scenario.initial_speed, 1.0, self.params)
        except NoTrimFound as e:
            self.logger.debug(f"No swept trim for the initial guess, holding the unswept one: {e}")
            return self.initial_state.copy(), trim_input.copy()
        return swept.state, swept.input

    def warm_guess(self, previous: PhasedTrajectory) -> np.ndarray:
        """Previous solution sampled at this layout's node times."""
        lay = self.layout
        v = np.zeros(lay.size)
        for p, n in enumerate(lay.nodes):
            t0, t1 = previous.phase_times[p], previous.phase_times[p + 1]
            seg = previous.segments[p]
            t = np.linspace(t0, t1, n)
            o = lay.offsets[p]
            v[o:o + n * NX] = (seg.state_at(t) / self.sx).ravel()
            v[o + n * NX:o + n * (NX + NU)] = (seg.input_at(t) / self.su).ravel()
            v[lay.duration_index(p)] = t1 - t0
        return v

    def decode(self, v: np.ndarray, objective: float) -> PhasedTrajectory:
        times, states, inputs, phases = [], [], [], []
        phase_times = [0.0]
        for p, n in enumerate(self.layout.nodes):
            xs, us, T = self.layout.unpack(v, p)
            t = phase_times[-1] + np.linspace(0.0, T, n)
            keep = slice(None) if p == len(self.layout.nodes) - 1 else slice(None, -1)
            times.append(t[keep]); states.append(xs[keep] * self.sx); inputs.append(us[keep] * self.su)
            phases.append(np.full(t[keep].size, p + 1))
            phase_times.append(phase_times[-1] + T)
        times, states = np.concatenate(times), np.concatenate(states)
        inputs, phases = np.concatenate(inputs), np.concatenate(phases)
        return PhasedTrajectory(times=times, states=states, inputs=inputs, phases=phases,
                                phase_times=np.array(phase_times), scenario=self.scenario,
                                objective=objective,
                                segments=_segments(times, states, inputs, phases, self.params))


def build_multiphase_problem(scenario: GapScenario, params: DroneParams,
                             nodes_per_phase: Sequence[int] = (20, 13, 20, 8),
                             settings: Optional[TrajoptConfig] = None) -> NlpProblem:
    """Transcribe the four-phase gap-passage problem into an NlpProblem.

    ``problem.meta`` carries the layout and the callback object for decoding. An
    even Phase-2 node count is bumped by one.
    """
    settings = settings or TrajoptConfig()
    nodes = tuple(int(n) for n in nodes_per_phase)
    if len(nodes) != len(Phase) or min(nodes) < 8:
        raise DomainError(f"need four phases with at least 8 nodes each, got {nodes}")
    if nodes[1] % 2 == 0:
        # the pinned gap node must sit at the Phase-2 time midpoint
        logger.warning(f"⚠️ Gap-passage phase needs an odd node count, using {nodes[1] + 1} instead of {nodes[1]}")
        nodes = (nodes[0], nodes[1] + 1, *nodes[2:])
    layout = TranscriptionLayout(nodes)
    trim = solve_trim(scenario.initial_speed, 0.0, params)
    tx = _Transcription(scenario, params, layout, settings, trim.state)

    expected = sum(n * (NX + NU) + 1 for n in nodes)
    assert layout.size == expected, "decision-vector layout mismatch"

    lower, upper = tx.bounds()
    problem = NlpProblem(
        n=layout.size, x0=tx.initial_guess(trim.input),
        residuals=tx.residuals, residual_jacobian=tx.residual_jacobian,
        objective=tx.objective if scenario.objective is ObjectiveCase.MIN_SWEPT_TIME else None,
        gradient=tx.gradient if scenario.objective is ObjectiveCase.MIN_SWEPT_TIME else None,
        eq=tx.eq, eq_jacobian=tx.eq_jacobian, lower=lower, upper=upper,
        name=f"gap-{scenario.objective.value}-V{scenario.initial_speed:g}-x{scenario.gap_x:g}-t{scenario.gap_threshold:g}",
        meta={'layout': layout, 'transcription': tx, 'trim': trim},
    )
    return problem


# ==============================================================================
# --- Verification ---
# ==============================================================================

def mesh_defects(traj: PhasedTrajectory, params: DroneParams, factor: int = 10) -> np.ndarray:
    """Per-interval scaled mismatch between node values and a fine RK4 integration.

    Each collocation interval is integrated with ``factor`` RK4 steps under the
    linearly interpolated input.
    """
    if traj.segments is None:
        raise DomainError("mesh check needs node-level trajectory")
    sx = state_scale(params)
    out = []
    for seg in traj.segments:
        x = seg.states[:-1].copy()
        h = np.diff(seg.times)[:, None]
        for i in range(factor):
            a0, a1 = i / factor, (i + 1) / factor
            u_mid = seg.inputs[:-1] + (0.5 * (a0 + a1)) * (seg.inputs[1:] - seg.inputs[:-1])
            x = _rk4_batch(x, u_mid, h / factor, params)
        out.append(np.max(np.abs(x - seg.states[1:]) / sx, axis=1))
    return np.concatenate(out)


def _rk4_batch(x: np.ndarray, u: np.ndarray, dt: np.ndarray, params: DroneParams) -> np.ndarray:
    k1 = state_derivative(x, u, params, strict=False)
    k2 = state_derivative(x + 0.5 * dt * k1, u, params, strict=False)
    k3 = state_derivative(x + 0.5 * dt * k2, u, params, strict=False)
    k4 = state_derivative(x + dt * k3, u, params, strict=False)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def check_gap_constraints(traj: PhasedTrajectory, settings: TrajoptConfig, tol: float = 1e-6) -> List[str]:
    """Violations of the Phase-2 box constraints among the trajectory samples."""
    scenario = traj.scenario
    gap = traj.phase_mask(Phase.GAP_PASSAGE)
    problems = []
    x = traj.states[gap, X]
    if np.any(x < scenario.anticipation_end_x - tol) or np.any(x > scenario.gap_exit_x + tol):
        problems.append("gap-passage x outside threshold interval")
    if np.any(traj.states[gap, XW] < settings.gap_sweep_min - tol):
        problems.append(f"gap-passage sweep below {settings.gap_sweep_min}")
    if np.any(np.abs(traj.inputs[gap, UW] - 1.0) > tol):
        problems.append("gap-passage sweep command not fully swept")
    return problems


# ==============================================================================
# --- Solve ---
# ==============================================================================

def solve_gap_trajectory(scenario: GapScenario, params: DroneParams,
                         settings: Optional[TrajoptConfig] = None,
                         nlp_settings: Optional[NlpSettings] = None) -> PhasedTrajectory:
    """Solve the gap-passage problem, refining the mesh until the defect check passes."""
    settings = settings or TrajoptConfig()
    nlp_settings = nlp_settings or NlpSettings(max_iter=settings.max_iterations)
    nodes = tuple(settings.nodes_per_phase)
    previous: Optional[PhasedTrajectory] = None
    start = time.perf_counter()

    for refinement in range(settings.max_refinements + 1):
        problem = build_multiphase_problem(scenario, params, nodes, settings)
        tx: _Transcription = problem.meta['transcription']
        nodes = problem.meta['layout'].nodes
        if previous is not None:
            problem.x0 = np.clip(tx.warm_guess(previous), problem.lower, problem.upper)
        solution = solve_nlp(problem, nlp_settings)
        if solution.status is not SolveStatus.CONVERGED:
            raise SolveFailed(f"{problem.name}: {solution.status.value} after {solution.iterations} "
                              f"iterations ({solution.message}); feasibility {solution.feasibility:.2e}",
                              status=solution.status.value)

        traj = tx.decode(solution.x, solution.objective)
        defects = mesh_defects(traj, params, settings.defect_check_factor)
        max_defect = float(defects.max())
        logger.debug(f"{problem.name}: nodes {nodes}, {solution.iterations} iterations, "
                     f"max defect {max_defect:.2e}")
        if max_defect < settings.defect_tolerance:
            violations = check_gap_constraints(traj, settings)
            if violations:
                raise SolveFailed(f"{problem.name}: {'; '.join(violations)}", status="ConstraintCheck")
            traj.meta = {
                'nodes_per_phase': list(nodes),
                'iterations': solution.iterations,
                'refinements': refinement,
                'max_defect': max_defect,
                'kkt': [solution.stationarity, solution.feasibility, solution.complementarity],
                'solve_seconds': time.perf_counter() - start,
            }
            return traj
        previous = traj
        nodes = tuple(2 * n - 1 for n in nodes)

    raise DefectTooLarge(f"max collocation defect {max_defect:.2e} exceeds "
                         f"{settings.defect_tolerance:.0e} after {settings.max_refinements} refinements")


def resample_trajectory(traj: PhasedTrajectory, dt: float) -> PhasedTrajectory:
    """Uniformly spaced samples from the collocation interpolant.

    Phase tags follow the location of each sample's interval midpoint; the
    interpolants and phase times are carried over, so ``duration`` is unchanged.
    """
    if not dt > 0 or dt > float(traj.phase_durations.min()) + 1e-12:
        raise DomainError(f"resample dt={dt} must be in (0, shortest phase duration]")
    t0 = traj.phase_times[0]
    count = int(np.floor(traj.duration / dt + 1e-9)) + 1
    times = t0 + dt * np.arange(count)
    states, inputs = traj.sample(times)
    mid = np.minimum(times + 0.5 * dt, traj.phase_times[-1])
    phases = traj.phase_at(mid)
    return PhasedTrajectory(times=times, states=states, inputs=inputs, phases=phases,
                            phase_times=traj.phase_times.copy(), scenario=traj.scenario,
                            objective=traj.objective, segments=traj.segments,
                            meta={**traj.meta, 'resample_dt': dt})


def trajectory_summary(traj: PhasedTrajectory) -> Dict[str, float]:
    """Scalar statistics used by the matrix report."""
    scenario = traj.scenario
    t, s = traj.times, traj.states
    durations = traj.phase_durations

    def phase_average(values, phase: Phase) -> float:
        t0, t1 = traj.phase_times[int(phase) - 1], traj.phase_times[int(phase)]
        grid = np.linspace(t0, t1, 200)
        return float(trapezoid(values(grid), grid) / (t1 - t0))

    def state_fn(index, transform=lambda v: v):
        if traj.segments is not None:
            return lambda grid: transform(traj.sample(grid)[0][:, index])
        return lambda grid: transform(np.interp(grid, t, s[:, index]))

    z0 = s[0, Z]
    gap_speed = scenario.gap_threshold / durations[1]
    return {
        'anticipation_abs_dz': phase_average(state_fn(Z, lambda v: np.abs(v - z0)), Phase.ANTICIPATION),
        'gap_speed': float(gap_speed),
        'gap_speed_gain': float(gap_speed - scenario.initial_speed),
        'mean_gap_pitch': phase_average(state_fn(THETA), Phase.GAP_PASSAGE),
        'swept_duration': float(durations[1]),
        'duration': traj.duration,
        'trim_pitch': float(s[0, THETA]),
        'max_pitch': float(s[:, THETA].max()),
        'objective': float(traj.objective),
    }
