#!/usr/bin/env python3
"""
Longitudinal Dynamics
=====================

10-state longitudinal equations of motion of the wing-sweep drone with motor,
elevator and sweep actuator models, RK4 integration, finite-difference
linearization and level-flight trim.

State  x = [x, z, θ, u, w, q, Ω_m, x_w, ẋ_w, x_e]
Input  u = [u_m, u_e, u_w]

Frames: inertial z points up, body x forward and body z down, θ positive
nose-up. Every function accepts batches with leading dimensions.
"""

from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import root

from aero import aero_loads
from errors import DomainError, NoTrimFound, StallDomainError
from params import DroneParams
from utils import setup_logging

logger = setup_logging(__name__)

STATE_NAMES = ('x', 'z', 'theta', 'u', 'w', 'q', 'omega_m', 'x_w', 'xdot_w', 'x_e')
INPUT_NAMES = ('u_m', 'u_e', 'u_w')
X, Z, THETA, U, W, Q, OMEGA, XW, XWDOT, XE = range(10)
UM, UE, UW = range(3)
NX, NU = 10, 3


@dataclass(frozen=True)
class State:
    x: float = 0.0
    z: float = 0.0
    theta: float = 0.0
    u: float = 0.0
    w: float = 0.0
    q: float = 0.0
    omega_m: float = 0.0
    x_w: float = 0.0
    xdot_w: float = 0.0
    x_e: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values) -> "State":
        return cls(*(float(v) for v in np.asarray(values, dtype=float).reshape(NX)))


@dataclass(frozen=True)
class Input:
    u_m: float = 0.0
    u_e: float = 0.0
    u_w: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.u_m, self.u_e, self.u_w], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Input":
        return cls(*(float(v) for v in np.asarray(values, dtype=float).reshape(NU)))


def as_array(value, size: int) -> np.ndarray:
    if hasattr(value, 'to_array'):
        return value.to_array()
    arr = np.asarray(value, dtype=float)
    if arr.shape[-1] != size:
        raise DomainError(f"expected trailing dimension {size}, got shape {arr.shape}")
    return arr


def state_scale(params: DroneParams) -> np.ndarray:
    """Typical magnitudes used to scale solver variables."""
    return np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, params.motor.max_speed, 1.0, 10.0, 1.0])


def input_scale(params: DroneParams) -> np.ndarray:
    return np.array([1.0, params.elevator.rate_limit, 1.0])


def thrust(omega_m, params: DroneParams):
    return params.motor.thrust_coeff * np.asarray(omega_m, dtype=float) ** 2


# ==============================================================================
# --- Equations of Motion ---
# ==============================================================================

def state_derivative(state, inp, params: DroneParams, strict: bool = True) -> np.ndarray:
    """ẋ = f(x, u)."""
    s = as_array(state, NX)
    v = as_array(inp, NU)
    batch = np.broadcast_shapes(s.shape[:-1], v.shape[:-1])
    s = np.broadcast_to(s, batch + (NX,))
    v = np.broadcast_to(v, batch + (NU,))
    theta, u, w, q = s[..., THETA], s[..., U], s[..., W], s[..., Q]
    omega, x_w, xdot_w = s[..., OMEGA], s[..., XW], s[..., XWDOT]

    thrust_m = thrust(omega, params)
    loads = aero_loads(s, thrust_m, params, strict=strict)
    force = loads.force
    mass, g = params.mass, params.air.g
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    motor = params.motor
    actuator = params.sweep_actuator
    wn, zeta = actuator.natural_freq, actuator.damping_ratio

    deriv = np.empty(batch + (NX,))
    deriv[..., X] = u * cos_t + w * sin_t
    deriv[..., Z] = u * sin_t - w * cos_t
    deriv[..., THETA] = q
    deriv[..., U] = (force[..., 0] + thrust_m) / mass - g * sin_t - q * w
    deriv[..., W] = force[..., 1] / mass + g * cos_t + q * u
    deriv[..., Q] = loads.moment / params.inertia_yy
    deriv[..., OMEGA] = (motor.steady_speed(v[..., UM]) - omega) / motor.time_constant
    deriv[..., XW] = xdot_w
    deriv[..., XWDOT] = wn ** 2 * (v[..., UW] - x_w) - 2.0 * zeta * wn * xdot_w
    deriv[..., XE] = v[..., UE]
    return deriv


def rk4_step(state, inp, dt: float, params: DroneParams, strict: bool = True) -> np.ndarray:
    """Classical 4-stage explicit step with the input held constant."""
    if not dt > 0:
        raise DomainError("dt must be > 0")
    s = as_array(state, NX)
    v = as_array(inp, NU)
    k1 = state_derivative(s, v, params, strict)
    k2 = state_derivative(s + 0.5 * dt * k1, v, params, strict)
    k3 = state_derivative(s + 0.5 * dt * k2, v, params, strict)
    k4 = state_derivative(s + dt * k3, v, params, strict)
    return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(state, inp, duration: float, dt: float, params: DroneParams,
              strict: bool = True) -> np.ndarray:
    """Hold ``inp`` for ``duration`` using steps of at most ``dt``."""
    steps = max(1, int(np.ceil(duration / dt - 1e-9)))
    h = duration / steps
    s = as_array(state, NX)
    for _ in range(steps):
        s = rk4_step(s, inp, h, params, strict)
    return s


def rollout(state, inputs: Sequence, dt: float, params: DroneParams, substeps: int = 1) -> np.ndarray:
    """States x_0..x_K under a zero-order-hold input sequence of length K."""
    s = as_array(state, NX)
    trajectory = [s]
    for inp in inputs:
        for _ in range(substeps):
            s = rk4_step(s, inp, dt / substeps, params)
        trajectory.append(s)
    return np.array(trajectory)


# ==============================================================================
# --- Linearization ---
# ==============================================================================

def _perturbations(z: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference batch (..., 2n, n) around ``z`` with steps eps·(1 + |z_i|)."""
    n = z.shape[-1]
    h = eps * (1.0 + np.abs(z))
    delta = np.eye(n) * h[..., None, :]
    batch = np.concatenate([z[..., None, :] + delta, z[..., None, :] - delta], axis=-2)
    return batch, h


def linearize_batch(states: np.ndarray, inputs: np.ndarray, params: DroneParams,
                    eps: float = 1e-6, discrete: bool = False, dt: Optional[float] = None,
                    substeps: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobians for K points at once: A (K, 10, 10), B (K, 10, 3)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    z = np.concatenate([states, inputs], axis=-1)
    batch, h = _perturbations(z, eps)
    xs, us = batch[..., :NX], batch[..., NX:]
    if discrete:
        if dt is None:
            raise DomainError("discrete linearization needs dt")
        values = xs
        for _ in range(substeps):
            values = rk4_step(values, us, dt / substeps, params)
    else:
        values = state_derivative(xs, us, params)
    n = NX + NU
    jac = (values[..., :n, :] - values[..., n:, :]) / (2.0 * h[..., :, None])
    jac = np.swapaxes(jac, -1, -2)
    return jac[..., :NX], jac[..., NX:]


def linearize(state, inp, params: DroneParams, eps: float = 1e-6, discrete: bool = False,
              dt: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """A = ∂f/∂x (10×10) and B = ∂f/∂u (10×3); of rk4_step when ``discrete``."""
    a, b = linearize_batch(as_array(state, NX)[None], as_array(inp, NU)[None], params,
                           eps=eps, discrete=discrete, dt=dt)
    return a[0], b[0]


# ==============================================================================
# --- Trim ---
# ==============================================================================

@dataclass(frozen=True)
class TrimPoint:
    state: np.ndarray
    input: np.ndarray
    thrust: float
    residual_norm: float

    @property
    def pitch(self) -> float:
        return float(self.state[THETA])


def trim_state(speed: float, x_w: float, theta: float, x_e: float, omega: float) -> np.ndarray:
    s = np.zeros(NX)
    s[THETA] = theta
    s[U] = speed * np.cos(theta)
    s[W] = speed * np.sin(theta)
    s[OMEGA] = omega
    s[XW] = x_w
    s[XE] = x_e
    return s


def _trim_residual(unknowns: np.ndarray, speed: float, x_w: float, params: DroneParams) -> np.ndarray:
    theta, x_e, u_m, omega = unknowns
    state = trim_state(speed, x_w, theta, x_e, omega)
    deriv = state_derivative(state, np.array([u_m, 0.0, x_w]), params, strict=False)
    return np.array([deriv[U], deriv[W], deriv[Q], deriv[OMEGA] * params.motor.time_constant / params.motor.max_speed])


@lru_cache(maxsize=256)
def _solve_trim_cached(speed: float, x_w: float, params: DroneParams) -> TrimPoint:
    rng = np.random.default_rng(0)
    seeds = [(np.radians(4.0), 0.0, 0.4)]
    seeds += [(np.radians(rng.uniform(0.0, 15.0)), rng.uniform(-0.6, 0.6), rng.uniform(0.1, 0.9))
              for _ in range(5)]

    best = np.inf
    for theta0, x_e0, u_m0 in seeds:
        guess = np.array([theta0, x_e0, u_m0, params.motor.steady_speed(u_m0)])
        try:
            sol = root(_trim_residual, guess, args=(speed, x_w, params), method='hybr',
                       options={'xtol': 1e-14, 'maxfev': 2000})
        except StallDomainError:
            continue
        theta, x_e, u_m, omega = sol.x
        residual = float(np.linalg.norm(_trim_residual(sol.x, speed, x_w, params)))
        best = min(best, residual)
        feasible = (0.0 <= u_m <= 1.0 and abs(x_e) <= 1.0 and abs(theta) < np.pi / 4 and omega >= 0.0
                    and thrust(omega, params) <= params.motor.max_thrust * (1.0 + 1e-9))
        if residual < 1e-8 and feasible:
            state = trim_state(speed, x_w, theta, x_e, omega)
            t = float(thrust(omega, params))
            logger.debug(f"Trim at {speed:.2f} m/s, x_w={x_w:.2f}: theta={np.degrees(theta):.2f} deg, "
                         f"u_m={u_m:.3f}, T={t:.3f} N")
            return TrimPoint(state=state, input=np.array([u_m, 0.0, x_w]), thrust=t, residual_norm=residual)
    raise NoTrimFound(f"no level-flight trim at {speed} m/s with x_w={x_w} "
                      f"(best residual {best:.2e} after {len(seeds)} seeds)")


def solve_trim(speed: float, x_w: float, params: DroneParams) -> TrimPoint:
    """Level-flight equilibrium at ``speed`` with sweep fixed at ``x_w``."""
    if not 3.0 <= speed <= 12.0:
        raise DomainError(f"trim speed {speed} outside [3, 12] m/s")
    if not 0.0 <= x_w <= 1.0:
        raise DomainError(f"sweep state {x_w} outside [0, 1]")
    point = _solve_trim_cached(float(speed), float(x_w), params)
    return TrimPoint(state=point.state.copy(), input=point.input.copy(),
                     thrust=point.thrust, residual_norm=point.residual_norm)
