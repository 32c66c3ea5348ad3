#!/usr/bin/env python3
"""
Wing-Sweep Aerodynamics
=======================

Lift, drag and pitch moments of the morphing wing and the horizontal tail for
angles of attack in [-π/2, π/2].

Conventions (used throughout the toolkit):
  * body axes: x forward, z down; pitch moment positive nose-up.
  * α = atan2(w_rel, u_rel) of the drone velocity relative to the air.
  * wind-frame loads (D, L) map to body axes through
        f_x = -D cos α + L sin α,   f_z = -D sin α - L cos α
    so lift points up (negative body z) at α = 0.
  * a point at (x_p, z_p) relative to the CG moves with v_qs = (q z_p, -q x_p).
  * a force (f_x, f_z) acting at (r_x, r_z) gives τ = r_z f_x - r_x f_z.
  * chordwise positions ξ are measured aft from the wing leading edge; the wing
    plane sits cg_z above the CG, so a chord point maps to (x_cg - ξ, -cg_z).

All functions broadcast over leading dimensions; states are (..., 10) arrays.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from errors import DomainError, StallDomainError
from params import AirfoilParams, DroneParams, SweepGeometry, sweep_geometry

HALF_PI = 0.5 * np.pi


def _out(value):
    """0-d arrays come back as numpy scalars."""
    arr = np.asarray(value)
    return arr[()] if arr.ndim == 0 else arr


# ==============================================================================
# --- Coefficient Building Blocks ---
# ==============================================================================

def reynolds_factor(re, re_nominal: float, a: float):
    """Low-Reynolds lift degradation f_Re = 1 - [1 - min(Re/Re_nom, 1)]^a."""
    re = np.asarray(re, dtype=float)
    if np.any(re < 0):
        raise DomainError("Reynolds number must be non-negative")
    ratio = np.minimum(re / re_nominal, 1.0)
    return _out(1.0 - (1.0 - ratio) ** a)


def reynolds_number(speed, mac, params: DroneParams):
    chord = np.asarray(mac) * params.geometry.reynolds_chord_scale
    return params.air.rho * np.asarray(speed) * chord / params.air.mu


def stall_correction_K(alpha, alpha_stall: float):
    """Finite-wing post-stall correction K(α); zero at α_st and π."""
    alpha = np.asarray(alpha, dtype=float)
    arg = np.pi * (np.abs(alpha) - alpha_stall) / (np.pi - alpha_stall) - HALF_PI
    return _out(np.cos(arg))


def sigmoid_blend(alpha, alpha_stall: float, M: float):
    """σ(α) → 0 well inside ±α_st, → 1 beyond."""
    alpha = np.asarray(alpha, dtype=float)
    # [1 + e⁻ + e⁺] / [(1 + e⁻)(1 + e⁺)] written with logistic terms so it never overflows
    upper = expit(M * (alpha - alpha_stall))
    lower = expit(M * (alpha + alpha_stall))
    return _out((1.0 - lower) + lower * upper)


def drag_reduction_factor(aspect):
    """k_Cd(Λ) = 1 - 0.41 (1 - exp(-17/Λ))."""
    return _out(1.0 - 0.41 * (1.0 - np.exp(-17.0 / np.asarray(aspect, dtype=float))))


def pre_stall_coefficients(alpha, aspect, f_re, airfoil: AirfoilParams):
    """Attached-flow (cL, cD) with the elliptical-wing slope factor."""
    aspect = np.asarray(aspect, dtype=float)
    slope_factor = aspect / (2.0 + np.sqrt(4.0 + aspect ** 2))
    c_l = np.asarray(f_re) * (airfoil.cl0 + airfoil.cl_alpha * slope_factor * np.asarray(alpha))
    c_d = airfoil.cd0 + c_l ** 2 / (np.pi * aspect)
    return _out(c_l), _out(c_d)


def post_stall_coefficients(alpha, aspect, f_re, alpha_stall: float):
    """Flat-plate (cL, cD) with the finite-wing correction."""
    alpha = np.asarray(alpha, dtype=float)
    correction = 1.0 - stall_correction_K(alpha, alpha_stall) * (1.0 - drag_reduction_factor(aspect))
    scale = 2.0 * np.asarray(f_re) * correction
    return _out(scale * np.sin(alpha) * np.cos(alpha)), _out(scale * np.sin(alpha) ** 2)


@dataclass(frozen=True)
class WingCoefficients:
    cL: Any
    cD: Any
    sigma: Any
    f_re: Any


def _blend_coefficients(alpha, speed, geo: SweepGeometry, params: DroneParams) -> WingCoefficients:
    airfoil = params.airfoil
    f_re = reynolds_factor(reynolds_number(speed, geo.mac, params), airfoil.re_nominal, airfoil.re_exponent)
    cl_pre, cd_pre = pre_stall_coefficients(alpha, geo.aspect, f_re, airfoil)
    cl_st, cd_st = post_stall_coefficients(alpha, geo.aspect, f_re, airfoil.alpha_stall)
    sigma = sigmoid_blend(alpha, airfoil.alpha_stall, airfoil.blend_M)
    c_l = (1.0 - sigma) * cl_pre + sigma * cl_st
    c_d = (1.0 - sigma) * cd_pre + sigma * cd_st
    return WingCoefficients(cL=_out(c_l), cD=_out(c_d), sigma=_out(sigma), f_re=_out(f_re))


def wing_coefficients(alpha, speed, x_w, params: DroneParams) -> WingCoefficients:
    """Blended 3-D wing (cL, cD) at angle α, flow speed and sweep state."""
    alpha = np.asarray(alpha, dtype=float)
    speed = np.asarray(speed, dtype=float)
    x_w = np.asarray(x_w, dtype=float)
    if np.any(np.abs(alpha) > HALF_PI):
        raise DomainError("angle of attack outside [-pi/2, pi/2]")
    if np.any(speed < 0):
        raise DomainError("speed must be non-negative")
    if np.any(x_w < 0) or np.any(x_w > 1):
        raise DomainError("sweep state must lie in [0, 1]")
    return _blend_coefficients(alpha, speed, sweep_geometry(params, x_w), params)


def slipstream_speed(u_body, thrust, params: DroneParams):
    """Momentum-theory slipstream increment u_s over wing root and tail."""
    thrust = np.asarray(thrust, dtype=float)
    if np.any(thrust < 0):
        raise DomainError("thrust must be non-negative")
    u_body = np.asarray(u_body, dtype=float)
    disk = params.air.rho * np.pi * params.prop_radius ** 2
    return _out(-0.5 * u_body + 0.5 * np.sqrt(u_body ** 2 + 2.0 * thrust / disk))


def chordwise_cp(alpha, mac):
    return np.asarray(mac) / 4.0 * (1.0 + 2.0 * np.abs(alpha) / np.pi)


def center_of_pressure(alpha, x_w, params: DroneParams):
    """Body-frame arm (x, z) from the CG to the wing center of pressure."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(np.abs(alpha) >= HALF_PI):
        raise DomainError("center of pressure undefined for |alpha| >= pi/2")
    geo = sweep_geometry(params, x_w)
    x_cp = chordwise_cp(alpha, geo.mac)
    r_x = geo.x_cg - x_cp
    r_z = np.broadcast_to(-params.cg_z, np.shape(r_x))
    return _out(np.stack([r_x, r_z], axis=-1))


# ==============================================================================
# --- Loads ---
# ==============================================================================

@dataclass(frozen=True)
class AeroBreakdown:
    """Wing, tail and motor loads in body axes, plus the intermediates."""
    f_wing_free: np.ndarray
    f_wing_slip: np.ndarray
    f_tail: np.ndarray
    tau_wing: Any
    tau_tail: Any
    tau_motor: Any
    coeffs: Dict[str, Any]
    u_slip: Any
    alpha_wing: Any = None
    alpha_slip: Any = None
    alpha_tail: Any = None
    r_cp_free: Optional[np.ndarray] = None
    r_cp_slip: Optional[np.ndarray] = None
    tau_w0: Any = 0.0

    @property
    def force(self) -> np.ndarray:
        return self.f_wing_free + self.f_wing_slip + self.f_tail

    @property
    def moment(self):
        return self.tau_wing + self.tau_tail + self.tau_motor


def wind_to_body(alpha, drag, lift) -> np.ndarray:
    """R_α [D, L] → (f_x, f_z)."""
    c, s = np.cos(alpha), np.sin(alpha)
    return np.stack([-drag * c + lift * s, -drag * s - lift * c], axis=-1)


def cross2(r: np.ndarray, f: np.ndarray):
    """Pitch moment of force ``f`` applied at arm ``r`` (both (..., 2) in x, z)."""
    return r[..., 1] * f[..., 0] - r[..., 0] * f[..., 1]


def _split(state):
    s = np.asarray(state, dtype=float)
    if s.shape[-1] != 10:
        raise DomainError(f"state must have 10 components, got shape {s.shape}")
    return s


def wing_loads(state, thrust, params: DroneParams, strict: bool = True) -> AeroBreakdown:
    """Wing loads from the freestream and slipstream regions (tail fields zero)."""
    s = _split(state)
    thrust = np.asarray(thrust, dtype=float)
    u, w, q, x_w = s[..., 3], s[..., 4], s[..., 5], s[..., 7]
    rho = params.air.rho
    geo = sweep_geometry(params, x_w)

    # quasi-steady velocity at the wing mid-chord
    x_mid = geo.x_cg - 0.5 * geo.mac
    z_mid = -params.cg_z
    v_x = u + q * z_mid
    v_z = w - q * x_mid
    alpha_w = np.arctan2(v_z, v_x)
    if strict and np.any(np.abs(alpha_w) >= HALF_PI):
        raise StallDomainError(f"wing angle of attack {np.max(np.abs(alpha_w)):.3f} rad outside (-pi/2, pi/2)")
    speed_sq = v_x ** 2 + v_z ** 2

    u_s = slipstream_speed(u, thrust, params)
    vs_x = v_x + u_s
    alpha_ws = np.arctan2(v_z, vs_x)
    speed_s_sq = vs_x ** 2 + v_z ** 2

    free = _blend_coefficients(alpha_w, np.sqrt(speed_sq), geo, params)
    slip = _blend_coefficients(alpha_ws, np.sqrt(speed_s_sq), geo, params)

    area_s = params.slipstream_area
    area_f = geo.S_w - area_s
    q_free = 0.5 * rho * speed_sq
    q_slip = 0.5 * rho * speed_s_sq
    q_slip_drag = q_free if params.airfoil.literal_slip_drag else q_slip

    f_free = wind_to_body(alpha_w, q_free * area_f * free.cD, q_free * area_f * free.cL)
    f_slip = wind_to_body(alpha_ws, q_slip_drag * area_s * slip.cD, q_slip * area_s * slip.cL)

    z_arm = np.broadcast_to(-params.cg_z, np.shape(alpha_w))
    r_free = np.stack([geo.x_cg - chordwise_cp(alpha_w, geo.mac), z_arm], axis=-1)
    r_slip = np.stack([geo.x_cg - chordwise_cp(alpha_ws, geo.mac), z_arm], axis=-1)
    tau_w0 = 0.5 * rho * geo.mac * params.airfoil.ctau0 * (area_f * speed_sq + area_s * speed_s_sq)
    tau_wing = cross2(r_free, f_free) + cross2(r_slip, f_slip) + tau_w0

    zeros2 = np.zeros_like(f_free)
    zero = np.zeros_like(tau_wing)
    return AeroBreakdown(
        f_wing_free=f_free, f_wing_slip=f_slip, f_tail=zeros2,
        tau_wing=_out(tau_wing), tau_tail=_out(zero), tau_motor=_out(zero),
        coeffs={'cL_free': free.cL, 'cD_free': free.cD, 'cL_slip': slip.cL, 'cD_slip': slip.cD,
                'sigma_free': free.sigma, 'f_re_free': free.f_re},
        u_slip=_out(u_s), alpha_wing=_out(alpha_w), alpha_slip=_out(alpha_ws),
        r_cp_free=r_free, r_cp_slip=r_slip, tau_w0=_out(tau_w0),
    )


def tail_loads(state, thrust, params: DroneParams) -> AeroBreakdown:
    """Flat-plate horizontal-tail loads at α_t,eff = k_ele (flow angle + δ_e)."""
    s = _split(state)
    thrust = np.asarray(thrust, dtype=float)
    u, w, q, x_e = s[..., 3], s[..., 4], s[..., 5], s[..., 9]
    elev = params.elevator
    x_t, z_t = elev.tail_arm_x, elev.tail_arm_z

    u_s = slipstream_speed(u, thrust, params)
    v_x = u + q * z_t + u_s
    v_z = w - q * x_t
    flow = np.arctan2(v_z, v_x)
    alpha_t = flow + x_e * elev.max_deflection
    alpha_eff = elev.effectiveness * alpha_t
    c_l = 2.0 * np.sin(alpha_eff) * np.cos(alpha_eff)
    c_d = 2.0 * np.sin(alpha_eff) ** 2

    dyn = 0.5 * params.air.rho * (v_x ** 2 + v_z ** 2) * elev.tail_area
    f_tail = wind_to_body(flow, dyn * c_d, dyn * c_l)
    r_t = np.broadcast_to(np.array([x_t, z_t]), f_tail.shape)
    tau_tail = cross2(r_t, f_tail)

    zeros2 = np.zeros_like(f_tail)
    zero = np.zeros_like(tau_tail)
    return AeroBreakdown(
        f_wing_free=zeros2, f_wing_slip=zeros2, f_tail=f_tail,
        tau_wing=_out(zero), tau_tail=_out(tau_tail), tau_motor=_out(zero),
        coeffs={'cL_tail': _out(c_l), 'cD_tail': _out(c_d)},
        u_slip=_out(u_s), alpha_tail=_out(alpha_t),
    )


def aero_loads(state, thrust, params: DroneParams, strict: bool = True) -> AeroBreakdown:
    """Complete breakdown: wing, tail and the thrust-line pitch moment."""
    wing = wing_loads(state, thrust, params, strict=strict)
    tail = tail_loads(state, thrust, params)
    tau_motor = params.motor.thrust_moment_arm_z * np.asarray(thrust, dtype=float) * np.ones_like(wing.tau_wing)
    return AeroBreakdown(
        f_wing_free=wing.f_wing_free, f_wing_slip=wing.f_wing_slip, f_tail=tail.f_tail,
        tau_wing=wing.tau_wing, tau_tail=tail.tau_tail, tau_motor=_out(tau_motor),
        coeffs={**wing.coeffs, **tail.coeffs}, u_slip=wing.u_slip,
        alpha_wing=wing.alpha_wing, alpha_slip=wing.alpha_slip, alpha_tail=tail.alpha_tail,
        r_cp_free=wing.r_cp_free, r_cp_slip=wing.r_cp_slip, tau_w0=wing.tau_w0,
    )


# ==============================================================================
# --- Curve Export ---
# ==============================================================================

def aero_curves(params: DroneParams,
                alphas_deg: Optional[Sequence[float]] = None,
                sweeps_deg: Sequence[float] = (-5.0, 75.0),
                speeds: Sequence[float] = (4.0, 5.0, 6.0)) -> pd.DataFrame:
    """Wing cL, cD and whole-airframe cM (about the CG, zero thrust and elevator)
    over an α grid for each sweep angle and speed."""
    if alphas_deg is None:
        alphas_deg = np.arange(-8.0, 90.0 + 1e-9, 1.0)
    alphas = np.radians(np.asarray(alphas_deg, dtype=float))
    span = params.sweep_max_deg - params.sweep_min_deg
    rows = []
    for sweep in sweeps_deg:
        x_w = (sweep - params.sweep_min_deg) / span
        geo = sweep_geometry(params, x_w)
        for speed in speeds:
            coeffs = wing_coefficients(alphas, np.full_like(alphas, speed), np.full_like(alphas, x_w), params)
            states = np.zeros((alphas.size, 10))
            states[:, 3] = speed * np.cos(alphas)
            states[:, 4] = speed * np.sin(alphas)
            states[:, 7] = x_w
            loads = aero_loads(states, np.zeros(alphas.size), params, strict=False)
            c_m = loads.moment / (0.5 * params.air.rho * speed ** 2 * geo.S_w * geo.mac)
            rows.append(pd.DataFrame({
                'sweep_deg': sweep, 'speed': speed, 'alpha_deg': np.degrees(alphas),
                'cL': coeffs.cL, 'cD': coeffs.cD, 'cM': c_m,
            }))
    return pd.concat(rows, ignore_index=True)
