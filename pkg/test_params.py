import json
import math
from pathlib import Path

import numpy as np
import pytest

from errors import DegenerateGeometry, DomainError, ParseError, ScenarioError, ValidationError
from params import (DroneParams, GapScenario, ObjectiveCase, derive_geometry, geometry_at, load_config,
                    params_from_dict, params_to_dict, solve_sweep_natural_frequency, with_overrides)


def write_json(tmp_path: Path, data) -> Path:
    path = tmp_path / "params.json"
    path.write_text(json.dumps(data))
    return path


class TestLoadConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("")
        params = load_config(path)
        assert params.mass == pytest.approx(0.130)
        assert params == DroneParams()

    def test_negative_mass_names_the_field(self, tmp_path):
        with pytest.raises(ValidationError) as info:
            load_config(write_json(tmp_path, {"mass": -1}))
        assert info.value.field == "mass"

    def test_override_passes_through(self, tmp_path):
        params = load_config(write_json(tmp_path, {"airfoil": {"alpha_stall": 0.30}}))
        assert params.airfoil.alpha_stall == 0.30
        assert params.airfoil.cd0 == DroneParams().airfoil.cd0
        assert params.mass == DroneParams().mass

    def test_comment_keys_are_ignored(self, tmp_path):
        params = load_config(write_json(tmp_path, {"_comment": "x", "airfoil": {"_note": "y"}}))
        assert params == DroneParams()

    def test_unknown_field_rejected(self, tmp_path):
        with pytest.raises(ValidationError) as info:
            load_config(write_json(tmp_path, {"airfoil": {"cl_beta": 1.0}}))
        assert info.value.field == "airfoil.cl_beta"

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{mass: ")
        with pytest.raises(ParseError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_config(tmp_path / "nope.json")

    def test_yaml(self, tmp_path):
        path = tmp_path / "params.yaml"
        path.write_text("mass: 0.14\nmotor:\n  time_constant: 0.04\n")
        params = load_config(path)
        assert params.mass == 0.14
        assert params.motor.time_constant == 0.04

    def test_unsupported_schema_version(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(write_json(tmp_path, {"schema_version": 2}))

    def test_shipped_default_file(self):
        params = load_config(Path(__file__).parent / "default_config.json")
        defaults = DroneParams()
        assert params.mass == defaults.mass
        assert params.airfoil.alpha_stall == pytest.approx(defaults.airfoil.alpha_stall)
        assert params.motor.thrust_coeff == pytest.approx(defaults.motor.thrust_coeff)
        assert params.sweep_actuator.natural_freq == defaults.sweep_actuator.natural_freq

    def test_dict_round_trip(self):
        params = DroneParams(mass=0.15, cg_x_law=(0.001, 0.03))
        assert params_from_dict(params_to_dict(params)) == params

    def test_elevator_effectiveness_range(self):
        with pytest.raises(ValidationError) as info:
            params_from_dict({"elevator": {"effectiveness": 1.5}})
        assert info.value.field == "elevator.effectiveness"


class TestGeometry:
    def test_derived_constants(self):
        g = derive_geometry(0.67, 0.45, 4.8, 3.0)
        assert g.panel_length == pytest.approx(0.149, abs=1e-3)
        assert g.span_root == pytest.approx(0.373, abs=1e-3)

    def test_endpoints_reproduced(self, params):
        extended, swept = geometry_at(params, 0.0), geometry_at(params, 1.0)
        assert extended.theta_w == pytest.approx(math.radians(-5.0))
        assert swept.theta_w == pytest.approx(math.radians(75.0))
        assert extended.b_w == pytest.approx(0.67, rel=1e-9)
        assert swept.b_w == pytest.approx(0.45, rel=1e-9)
        assert extended.aspect == pytest.approx(4.8, rel=1e-9)
        assert swept.aspect == pytest.approx(3.0, rel=1e-9)

    def test_span_reduction(self, params):
        reduction = 1.0 - geometry_at(params, 1.0).b_w / geometry_at(params, 0.0).b_w
        assert 0.32 < reduction < 0.34

    def test_mid_sweep_cosine_law(self, params):
        g = params.geometry_constants
        assert geometry_at(params, 0.5).b_w == pytest.approx(g.span_root + 2 * g.panel_length * math.cos(math.radians(35.0)))

    def test_mac_and_aspect_definitions(self, params):
        geo = geometry_at(params, np.linspace(0, 1, 11))
        np.testing.assert_allclose(geo.mac, geo.S_w / geo.b_w)
        np.testing.assert_allclose(geo.aspect, geo.b_w ** 2 / geo.S_w)

    def test_span_and_area_decrease_once_past_zero_sweep(self, params):
        # cos Θ rises between -5° and 0°, so monotonicity holds from Θ = 0 on
        geo = geometry_at(params, np.linspace(0.0625, 1.0, 200))
        assert np.all(np.diff(geo.b_w) < 0)
        assert np.all(np.diff(geo.S_w) < 0)

    def test_aspect_ratio_range(self, params):
        aspect = geometry_at(params, np.linspace(0, 1, 101)).aspect
        assert aspect.min() >= 2.5
        assert aspect.max() <= 5.5

    def test_cg_variation_bound(self, params):
        x_cg = geometry_at(params, np.linspace(0, 1, 101)).x_cg
        assert np.ptp(x_cg) <= 4e-3

    @pytest.mark.parametrize("x_w", [-0.1, 1.1, float("nan")])
    def test_sweep_domain(self, params, x_w):
        with pytest.raises(DomainError):
            geometry_at(params, x_w)

    def test_degenerate_spans(self):
        with pytest.raises(DegenerateGeometry):
            derive_geometry(0.45, 0.67, 4.8, 3.0)

    def test_degenerate_symmetric_sweep_limits(self):
        with pytest.raises(DegenerateGeometry):
            derive_geometry(0.67, 0.45, 4.8, 3.0, sweep_min_deg=-30.0, sweep_max_deg=30.0)

    def test_slipstream_area_fits_the_wing(self, params):
        assert params.slipstream_area <= geometry_at(params, np.linspace(0, 1, 101)).S_w.min()


class TestActuatorCalibration:
    def test_sweep_natural_frequency_default(self, params):
        omega = solve_sweep_natural_frequency(0.10, 0.9, 0.95)
        assert omega == pytest.approx(params.sweep_actuator.natural_freq, rel=0.01)

    def test_faster_travel_needs_higher_frequency(self):
        assert solve_sweep_natural_frequency(0.05) == pytest.approx(2 * solve_sweep_natural_frequency(0.10))

    def test_overdamped_rejected(self):
        with pytest.raises(DomainError):
            solve_sweep_natural_frequency(0.1, 1.2)


class TestScenario:
    def test_phase_boundaries(self):
        s = GapScenario(gap_x=4.0, gap_threshold=0.8, initial_speed=6.0)
        assert s.phase_end_x == pytest.approx((3.6, 4.4, 5.9, 6.4))
        assert 0 < s.anticipation_end_x < s.gap_x < s.gap_exit_x < s.recovery_end_x < s.end_x

    def test_threshold_interval_is_closed(self):
        s = GapScenario(gap_x=4.0, gap_threshold=0.8, initial_speed=6.0)
        assert s.in_threshold(3.6) and s.in_threshold(4.4)
        assert not s.in_threshold(3.59) and not s.in_threshold(4.41)

    @pytest.mark.parametrize("kwargs", [
        dict(gap_x=4.0, gap_threshold=0.0, initial_speed=6.0),
        dict(gap_x=0.3, gap_threshold=0.8, initial_speed=6.0),
        dict(gap_x=4.0, gap_threshold=0.8, initial_speed=0.0),
    ])
    def test_invalid_scenarios(self, kwargs):
        with pytest.raises(ScenarioError):
            GapScenario(**kwargs)

    def test_objective_parsing(self):
        assert GapScenario(4.0, 0.8, 6.0, objective=3).objective is ObjectiveCase.MIN_SWEPT_TIME
        assert GapScenario(4.0, 0.8, 6.0, objective="min_speed_variation").objective is ObjectiveCase.MIN_SPEED_VARIATION

    def test_dict_round_trip(self):
        s = GapScenario(gap_x=5.0, gap_threshold=1.2, initial_speed=7.0, objective=2)
        assert GapScenario(**s.to_dict()) == s


def test_with_overrides_scales_parameters(params):
    perturbed = with_overrides(params, mass=1.1, cd0=0.9, thrust_coeff=1.05)
    assert perturbed.mass == pytest.approx(1.1 * params.mass)
    assert perturbed.airfoil.cd0 == pytest.approx(0.9 * params.airfoil.cd0)
    assert perturbed.motor.thrust_coeff == pytest.approx(1.05 * params.motor.thrust_coeff)
    assert perturbed.airfoil.cl_alpha == params.airfoil.cl_alpha
    with pytest.raises(ValidationError):
        with_overrides(params, wingspan=1.1)
