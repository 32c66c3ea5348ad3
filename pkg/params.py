#!/usr/bin/env python3
"""
Drone Parameters and Gap Scenarios
==================================

Physical, geometric, aerodynamic and actuator constants of the wing-sweep drone,
the sweep-dependent geometry law, and config-file loading.

Geometry law: each outboard panel is rigid and pivots about a hinge at the tip
of the fixed root wing, so for sweep angle Θ

    b_w(Θ) = b_r + 2 l_o cos Θ        S_w(Θ) = S_r + 2 c_o l_o cos Θ

with mean aerodynamic chord c̄ = S_w / b_w and aspect ratio Λ = b_w² / S_w.
The four constants (b_r, l_o, c_o, S_r) are solved from span and aspect-ratio
endpoints at the sweep limits.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
import yaml
from scipy.optimize import brentq

from errors import DegenerateGeometry, DomainError, ParseError, ScenarioError, ValidationError
from utils import setup_logging

logger = setup_logging(__name__)

SCHEMA_VERSION = 1

# Soft physical range of the sweep state; aero evaluation clips here.
SWEEP_SOFT_RANGE = (-0.05, 1.05)


# ==============================================================================
# --- Parameter Records ---
# ==============================================================================

@dataclass(frozen=True)
class AirfoilParams:
    """Airfoil and wing aerodynamic constants."""
    cl0: float = 0.0
    cl_alpha: float = 2.0 * math.pi
    cd0: float = 0.05                           # calibration constant
    alpha_stall: float = math.radians(15.0)     # blended lift peak lands near 14°
    blend_M: float = 50.0
    re_exponent: float = 6.0                    # calibration constant
    re_nominal: float = 1.0e5
    ctau0: float = 0.0
    literal_slip_drag: bool = False             # use ‖v_i‖² in the slipstream drag row


@dataclass(frozen=True)
class AirParams:
    rho: float = 1.225
    mu: float = 1.81e-5
    g: float = 9.81


@dataclass(frozen=True)
class MotorParams:
    """First-order motor with polynomial steady-state speed Ω_ss(u_m) = Σ c_i u_m^i."""
    time_constant: float = 0.05
    poly_speed: Tuple[float, ...] = (0.0, 1000.0, 1000.0)
    thrust_coeff: float = 1.2 / 2000.0 ** 2
    max_thrust: float = 1.2
    thrust_moment_arm_z: float = 0.0

    @property
    def max_speed(self) -> float:
        return float(sum(self.poly_speed))

    def steady_speed(self, u_m):
        """Ω_ss(u_m), vectorized."""
        return np.polynomial.polynomial.polyval(u_m, self.poly_speed)


@dataclass(frozen=True)
class ElevatorParams:
    """Elevator and horizontal tail. Arms are body-frame coordinates relative to the CG."""
    max_deflection: float = math.radians(25.0)
    rate_limit: float = 8.0
    effectiveness: float = 0.6
    tail_area: float = 0.012
    tail_arm_x: float = -0.35
    tail_arm_z: float = -0.02


@dataclass(frozen=True)
class SweepActuatorParams:
    natural_freq: float = 40.3
    damping_ratio: float = 0.9


@dataclass(frozen=True)
class GeometryParams:
    """Endpoints the geometry law is solved from."""
    span_extended: float = 0.67
    span_swept: float = 0.45
    aspect_extended: float = 4.8
    aspect_swept: float = 3.0
    # 1.0 uses the aspect-ratio chord; ~1.165 reproduces Re = 45000 at 4 m/s mid-sweep.
    reynolds_chord_scale: float = 1.0


class GeometryConstants(NamedTuple):
    span_root: float
    panel_length: float
    panel_chord: float
    area_root: float


@dataclass(frozen=True)
class SweepGeometry:
    """Geometry evaluated at a sweep state (scalars or arrays)."""
    theta_w: Any
    b_w: Any
    S_w: Any
    mac: Any
    aspect: Any
    x_cg: Any


@dataclass(frozen=True)
class DroneParams:
    """All constants of the drone model. Immutable; derived geometry is cached."""
    mass: float = 0.130
    inertia_yy: float = 1.2e-3
    cg_z: float = 0.01
    # (slope [m/rad], intercept [m]) of x_cg(Θ_w); None → constant 0.25·c̄(mid-sweep)
    cg_x_law: Optional[Tuple[float, float]] = None
    sweep_min_deg: float = -5.0
    sweep_max_deg: float = 75.0
    sweep_travel_time: float = 0.10
    prop_radius: float = 0.0762
    airfoil: AirfoilParams = field(default_factory=AirfoilParams)
    air: AirParams = field(default_factory=AirParams)
    motor: MotorParams = field(default_factory=MotorParams)
    elevator: ElevatorParams = field(default_factory=ElevatorParams)
    sweep_actuator: SweepActuatorParams = field(default_factory=SweepActuatorParams)
    geometry: GeometryParams = field(default_factory=GeometryParams)

    def __post_init__(self):
        validate_params(self)

    @cached_property
    def geometry_constants(self) -> GeometryConstants:
        g = self.geometry
        return derive_geometry(g.span_extended, g.span_swept, g.aspect_extended, g.aspect_swept,
                               self.sweep_min_deg, self.sweep_max_deg)

    @property
    def span_root(self) -> float:
        return self.geometry_constants.span_root

    @property
    def panel_length(self) -> float:
        return self.geometry_constants.panel_length

    @property
    def panel_chord(self) -> float:
        return self.geometry_constants.panel_chord

    @property
    def area_root(self) -> float:
        return self.geometry_constants.area_root

    @property
    def root_chord(self) -> float:
        return self.area_root / self.span_root

    @property
    def slipstream_span(self) -> float:
        return 2.0 * self.prop_radius

    @property
    def slipstream_area(self) -> float:
        """S_s: strip of span 2R_p over the fixed root chord."""
        return self.slipstream_span * self.root_chord

    @cached_property
    def cg_x_coefficients(self) -> Tuple[float, float]:
        if self.cg_x_law is not None:
            return float(self.cg_x_law[0]), float(self.cg_x_law[1])
        mid = _raw_geometry(self, 0.5)
        return 0.0, 0.25 * float(mid[3])

    @property
    def weight(self) -> float:
        return self.mass * self.air.g


# ==============================================================================
# --- Geometry ---
# ==============================================================================

def derive_geometry(span_extended: float, span_swept: float,
                    aspect_extended: float, aspect_swept: float,
                    sweep_min_deg: float = -5.0, sweep_max_deg: float = 75.0) -> GeometryConstants:
    """Solve (b_r, l_o, c_o, S_r) so both span and both aspect-ratio endpoints are exact."""
    if not span_extended > span_swept > 0:
        raise DegenerateGeometry(f"need span_extended > span_swept > 0, got {span_extended}, {span_swept}")
    if aspect_extended <= 0 or aspect_swept <= 0:
        raise DegenerateGeometry("aspect ratios must be positive")

    c_min = math.cos(math.radians(sweep_min_deg))
    c_max = math.cos(math.radians(sweep_max_deg))
    if abs(c_min - c_max) < 1e-9:
        raise DegenerateGeometry("cos(sweep_min) equals cos(sweep_max); span law is not invertible")

    law = np.array([[1.0, 2.0 * c_min], [1.0, 2.0 * c_max]])
    span_root, panel_length = np.linalg.solve(law, [span_extended, span_swept])
    areas = [span_extended ** 2 / aspect_extended, span_swept ** 2 / aspect_swept]
    area_root, chord_times_length = np.linalg.solve(law, areas)
    panel_chord = chord_times_length / panel_length if panel_length > 0 else -1.0

    constants = GeometryConstants(float(span_root), float(panel_length), float(panel_chord), float(area_root))
    for name, value in constants._asdict().items():
        if value <= 0:
            raise DegenerateGeometry(f"{name} solved to {value:.6g} (must be > 0)")
    return constants


def sweep_angle(params: DroneParams, x_w):
    lo = math.radians(params.sweep_min_deg)
    hi = math.radians(params.sweep_max_deg)
    return lo + np.asarray(x_w, dtype=float) * (hi - lo)


def _raw_geometry(params: DroneParams, x_w):
    g = params.geometry_constants
    theta = sweep_angle(params, x_w)
    cos_t = np.cos(theta)
    b_w = g.span_root + 2.0 * g.panel_length * cos_t
    s_w = g.area_root + 2.0 * g.panel_chord * g.panel_length * cos_t
    return theta, b_w, s_w, s_w / b_w, b_w ** 2 / s_w


def sweep_geometry(params: DroneParams, x_w) -> SweepGeometry:
    """Geometry without domain checks; x_w is clipped to the soft physical range."""
    x_w = np.clip(np.asarray(x_w, dtype=float), *SWEEP_SOFT_RANGE)
    theta, b_w, s_w, mac, aspect = _raw_geometry(params, x_w)
    slope, intercept = params.cg_x_coefficients
    x_cg = intercept + slope * theta
    return SweepGeometry(theta_w=theta, b_w=b_w, S_w=s_w, mac=mac, aspect=aspect, x_cg=x_cg)


def geometry_at(params: DroneParams, x_w) -> SweepGeometry:
    """Θ_w, b_w, S_w, c̄, Λ and x_cg at normalized sweep x_w ∈ [0, 1]."""
    arr = np.asarray(x_w, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise DomainError(f"sweep state must lie in [0, 1], got {x_w}")
    return sweep_geometry(params, arr)


def solve_sweep_natural_frequency(travel_time: float = 0.10, damping_ratio: float = 0.9,
                                  level: float = 0.95) -> float:
    """ω_n such that a unit step of the second-order sweep actuator first reaches
    ``level`` after ``travel_time`` seconds."""
    if not 0.0 < damping_ratio < 1.0:
        raise DomainError("closed-form step response needs 0 < damping_ratio < 1")
    zeta = damping_ratio
    wd = math.sqrt(1.0 - zeta ** 2)

    def step(tau: float) -> float:
        # tau = ω_n t
        return 1.0 - math.exp(-zeta * tau) * (math.cos(wd * tau) + zeta / wd * math.sin(wd * tau))

    upper = 0.1
    while step(upper) < level:
        upper *= 1.5
    tau_star = brentq(lambda tau: step(tau) - level, 0.0, upper, xtol=1e-12)
    return tau_star / travel_time


# ==============================================================================
# --- Validation ---
# ==============================================================================

def _require(condition: bool, name: str, message: str) -> None:
    if not condition:
        raise ValidationError(name, message)


def validate_params(p: DroneParams) -> None:
    """Check every invariant; raises ValidationError naming the field."""
    _require(p.mass > 0, "mass", "must be > 0")
    _require(p.inertia_yy > 0, "inertia_yy", "must be > 0")
    _require(p.air.rho > 0, "air.rho", "must be > 0")
    _require(p.air.mu > 0, "air.mu", "must be > 0")
    _require(p.air.g > 0, "air.g", "must be > 0")
    _require(p.sweep_min_deg < p.sweep_max_deg, "sweep_min_deg", "must be < sweep_max_deg")
    _require(p.sweep_travel_time > 0, "sweep_travel_time", "must be > 0")
    _require(0.0 < p.airfoil.alpha_stall < math.pi / 2, "airfoil.alpha_stall", "must lie in (0, pi/2)")
    _require(p.airfoil.re_exponent >= 1.0, "airfoil.re_exponent", "must be >= 1")
    _require(p.airfoil.re_nominal > 0, "airfoil.re_nominal", "must be > 0")
    _require(p.airfoil.blend_M > 0, "airfoil.blend_M", "must be > 0")
    _require(p.airfoil.cd0 >= 0, "airfoil.cd0", "must be >= 0")
    _require(0.0 < p.elevator.effectiveness <= 1.0, "elevator.effectiveness", "must lie in (0, 1]")
    _require(p.elevator.max_deflection > 0, "elevator.max_deflection", "must be > 0")
    _require(p.elevator.rate_limit > 0, "elevator.rate_limit", "must be > 0")
    _require(p.elevator.tail_area > 0, "elevator.tail_area", "must be > 0")
    _require(p.elevator.tail_arm_x < 0, "elevator.tail_arm_x", "tail must sit aft of the CG (negative x)")
    _require(p.motor.time_constant > 0, "motor.time_constant", "must be > 0")
    _require(p.motor.thrust_coeff > 0, "motor.thrust_coeff", "must be > 0")
    _require(p.motor.max_thrust > 0, "motor.max_thrust", "must be > 0")
    _require(len(p.motor.poly_speed) >= 2, "motor.poly_speed", "needs at least two coefficients")
    _require(p.motor.max_speed > 0, "motor.poly_speed", "steady speed at full throttle must be > 0")
    _require(p.sweep_actuator.natural_freq > 0, "sweep_actuator.natural_freq", "must be > 0")
    _require(p.sweep_actuator.damping_ratio > 0, "sweep_actuator.damping_ratio", "must be > 0")
    _require(p.prop_radius > 0, "prop_radius", "must be > 0")
    _require(p.geometry.reynolds_chord_scale > 0, "geometry.reynolds_chord_scale", "must be > 0")

    # raises DegenerateGeometry on its own
    constants = p.geometry_constants
    _require(p.slipstream_span <= constants.span_root, "prop_radius",
             "slipstream strip wider than the fixed root wing")
    s_w = _raw_geometry(p, np.linspace(0.0, 1.0, 81))[2]
    _require(bool(np.all(p.slipstream_area <= s_w)), "prop_radius",
             "slipstream area exceeds wing area somewhere in the sweep range")


# ==============================================================================
# --- Gap Scenarios ---
# ==============================================================================

class ObjectiveCase(Enum):
    MIN_ALTITUDE_VARIATION = 1
    MIN_SPEED_VARIATION = 2
    MIN_SWEPT_TIME = 3

    @classmethod
    def parse(cls, value: Union[int, str, "ObjectiveCase"]) -> "ObjectiveCase":
        if isinstance(value, cls):
            return value
        if isinstance(value, str) and not value.isdigit():
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class GapScenario:
    gap_x: float
    gap_threshold: float
    initial_speed: float
    gap_center_z: float = 0.0
    objective: ObjectiveCase = ObjectiveCase.MIN_ALTITUDE_VARIATION
    recovery_length: float = 1.5
    steady_length: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'objective', ObjectiveCase.parse(self.objective))
        if not self.gap_threshold > 0:
            raise ScenarioError("gap_threshold", "must be > 0")
        if not self.gap_x > self.gap_threshold / 2:
            raise ScenarioError("gap_x", "must exceed half the gap threshold")
        if not self.initial_speed > 0:
            raise ScenarioError("initial_speed", "must be > 0")
        if not self.recovery_length > 0:
            raise ScenarioError("recovery_length", "must be > 0")
        if not self.steady_length > 0:
            raise ScenarioError("steady_length", "must be > 0")

    @property
    def anticipation_end_x(self) -> float:
        return self.gap_x - self.gap_threshold / 2

    @property
    def gap_exit_x(self) -> float:
        return self.gap_x + self.gap_threshold / 2

    @property
    def recovery_end_x(self) -> float:
        return self.gap_exit_x + self.recovery_length

    @property
    def end_x(self) -> float:
        return self.recovery_end_x + self.steady_length

    @property
    def phase_end_x(self) -> Tuple[float, float, float, float]:
        return (self.anticipation_end_x, self.gap_exit_x, self.recovery_end_x, self.end_x)

    def in_threshold(self, x) -> Any:
        x = np.asarray(x, dtype=float)
        return (x >= self.anticipation_end_x) & (x <= self.gap_exit_x)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['objective'] = self.objective.value
        return data


# ==============================================================================
# --- Config Files ---
# ==============================================================================

_SECTIONS = {
    'airfoil': AirfoilParams,
    'air': AirParams,
    'motor': MotorParams,
    'elevator': ElevatorParams,
    'sweep_actuator': SweepActuatorParams,
    'geometry': GeometryParams,
}


def _coerce(name: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true/false")
            return value
        if isinstance(default, tuple) or name.endswith('poly_speed'):
            return tuple(float(v) for v in value)
        return float(value)
    except (TypeError, ValueError) as e:
        raise ValidationError(name, f"invalid value {value!r} ({e})")


def _build_section(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(prefix, "expected a mapping")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key.startswith('_'):
            continue
        if key not in known:
            raise ValidationError(f"{prefix}.{key}", "unknown field")
        kwargs[key] = _coerce(f"{prefix}.{key}", value, getattr(defaults, key))
    return cls(**kwargs)


def params_from_dict(data: Optional[Dict[str, Any]]) -> DroneParams:
    """Build DroneParams from a (possibly partial) mapping; omitted fields take defaults."""
    data = dict(data or {})
    version = data.pop('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError("schema_version", f"unsupported version {version}")

    defaults = {f.name: f for f in fields(DroneParams)}
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key.startswith('_'):
            continue
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key == 'cg_x_law':
            if value is None:
                kwargs[key] = None
            elif isinstance(value, dict):
                unknown = set(value) - {'slope', 'intercept'}
                if unknown:
                    raise ValidationError(f"cg_x_law.{sorted(unknown)[0]}", "unknown field")
                if 'intercept' not in value:
                    raise ValidationError("cg_x_law.intercept", "required when cg_x_law is given")
                kwargs[key] = (_coerce("cg_x_law.slope", value.get('slope', 0.0), 0.0),
                               _coerce("cg_x_law.intercept", value['intercept'], 0.0))
            else:
                raise ValidationError("cg_x_law", "expected {slope, intercept}")
        elif key in defaults:
            kwargs[key] = _coerce(key, value, defaults[key].default)
        else:
            raise ValidationError(key, "unknown field")
    return DroneParams(**kwargs)


def load_config(path: Union[str, Path, None]) -> DroneParams:
    """Load DroneParams from a JSON (or YAML) file. ``None`` gives the defaults."""
    if path is None:
        return DroneParams()
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as e:
        raise ParseError(f"config file not found: {path}") from e

    if not text.strip():
        logger.info(f"Empty config {path}, using defaults")
        return DroneParams()

    try:
        if path.suffix.lower() in ('.yaml', '.yml'):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ParseError(f"could not parse {path}: {e}") from e

    if data is None:
        return DroneParams()
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    params = params_from_dict(data)
    logger.info(f"✅ Loaded parameters from {path}")
    return params


def params_to_dict(params: DroneParams, include_derived: bool = False) -> Dict[str, Any]:
    """Canonical mapping of the parameters (round-trips through params_from_dict)."""
    data: Dict[str, Any] = {'schema_version': SCHEMA_VERSION}
    for f in fields(params):
        value = getattr(params, f.name)
        if is_dataclass(value):
            value = asdict(value)
            value = {k: list(v) if isinstance(v, tuple) else v for k, v in value.items()}
        elif f.name == 'cg_x_law' and value is not None:
            value = {'slope': value[0], 'intercept': value[1]}
        data[f.name] = value
    if include_derived:
        slope, intercept = params.cg_x_coefficients
        data['derived'] = {
            **params.geometry_constants._asdict(),
            'root_chord': params.root_chord,
            'slipstream_area': params.slipstream_area,
            'cg_x_slope': slope,
            'cg_x_intercept': intercept,
            'max_motor_speed': params.motor.max_speed,
        }
    return data


def with_overrides(params: DroneParams, **scales: float) -> DroneParams:
    """Copy of ``params`` with multiplicative perturbations.

    Keys: ``mass``, ``cd0``, ``cl_alpha``, ``thrust_coeff``, ``inertia_yy``.
    """
    result = params
    for key, factor in scales.items():
        if key in ('mass', 'inertia_yy'):
            result = replace(result, **{key: getattr(result, key) * factor})
        elif key in ('cd0', 'cl_alpha'):
            result = replace(result, airfoil=replace(result.airfoil, **{key: getattr(result.airfoil, key) * factor}))
        elif key == 'thrust_coeff':
            result = replace(result, motor=replace(result.motor, thrust_coeff=result.motor.thrust_coeff * factor))
        else:
            raise ValidationError(key, "not a perturbable parameter")
    return result
