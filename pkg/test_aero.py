import math
from dataclasses import replace

import numpy as np
import pytest

from aero import (aero_curves, aero_loads, center_of_pressure, cross2, drag_reduction_factor, post_stall_coefficients,
                  pre_stall_coefficients, reynolds_factor, reynolds_number, slipstream_speed, stall_correction_K,
                  tail_loads, wing_coefficients, wing_loads)
from errors import DomainError
from params import AirfoilParams, geometry_at


def level_state(speed, alpha=0.0, x_w=0.0, q=0.0, x_e=0.0):
    state = np.zeros(10)
    state[3] = speed * math.cos(alpha)
    state[4] = speed * math.sin(alpha)
    state[5] = q
    state[7] = x_w
    state[9] = x_e
    return state


class TestCoefficientBlocks:
    @pytest.mark.parametrize("re, a, expected", [(1e5, 6.0, 1.0), (2e5, 6.0, 1.0), (0.0, 6.0, 0.0), (5e4, 2.0, 0.75)])
    def test_reynolds_factor(self, re, a, expected):
        assert reynolds_factor(re, 1e5, a) == pytest.approx(expected)

    def test_reynolds_factor_is_monotone(self):
        values = reynolds_factor(np.linspace(0, 1e5, 200), 1e5, 6.0)
        assert np.all(np.diff(values) > 0)

    def test_negative_reynolds_rejected(self):
        with pytest.raises(DomainError):
            reynolds_factor(-1.0, 1e5, 2.0)

    def test_stall_correction_zeros(self):
        alpha_st = math.radians(15.0)
        assert stall_correction_K(alpha_st, alpha_st) == pytest.approx(0.0, abs=1e-12)
        assert stall_correction_K(math.pi, alpha_st) == pytest.approx(0.0, abs=1e-12)
        assert stall_correction_K(-0.7, alpha_st) == pytest.approx(stall_correction_K(0.7, alpha_st))

    def test_stall_correction_at_right_angle(self):
        assert stall_correction_K(math.pi / 2, math.radians(14.0)) == pytest.approx(0.99, abs=0.005)

    def test_pre_stall_hand_value(self):
        airfoil = AirfoilParams()
        c_l, c_d = pre_stall_coefficients(0.1, 4.0, 1.0, airfoil)
        assert c_l == pytest.approx(0.3883, abs=1e-4)
        assert c_d - airfoil.cd0 == pytest.approx(0.0120, abs=1e-4)

    def test_post_stall_flat_plate(self):
        aspect = 6.0
        c_l, c_d = post_stall_coefficients(math.pi / 2 - 1e-9, aspect, 1.0, math.radians(14.0))
        assert c_l == pytest.approx(0.0, abs=1e-8)
        correction = 1.0 - stall_correction_K(math.pi / 2, math.radians(14.0)) * (1.0 - drag_reduction_factor(aspect))
        assert c_d == pytest.approx(2.0 * correction, rel=1e-6)

    def test_reynolds_chord_scale(self, params):
        scaled = replace(params, geometry=replace(params.geometry, reynolds_chord_scale=1.165))
        assert reynolds_number(6.0, 0.1, scaled) == pytest.approx(1.165 * reynolds_number(6.0, 0.1, params))


class TestWingCoefficients:
    def test_zero_alpha(self, params):
        c = wing_coefficients(0.0, 6.0, 0.5, params)
        assert c.cL == pytest.approx(0.0, abs=1e-12)
        assert c.cD == pytest.approx(params.airfoil.cd0, abs=1e-6)

    @pytest.mark.parametrize("x_w", [0.0, 0.5, 1.0])
    def test_symmetry(self, params, x_w):
        alphas = np.linspace(0.0, math.pi / 2, 181)
        pos = wing_coefficients(alphas, 5.0, x_w, params)
        neg = wing_coefficients(-alphas, 5.0, x_w, params)
        np.testing.assert_allclose(neg.cL, -pos.cL, atol=1e-12)
        np.testing.assert_allclose(neg.cD, pos.cD, atol=1e-12)

    @pytest.mark.parametrize("speed", [2.0, 6.0, 10.0])
    def test_drag_floor(self, params, speed):
        alphas = np.linspace(-math.pi / 2, math.pi / 2, 721)
        for x_w in (0.0, 0.5, 1.0):
            c = wing_coefficients(alphas, speed, x_w, params)
            assert np.all(c.cD >= params.airfoil.cd0 - 1e-6)

    @pytest.mark.parametrize("speed", [2.0, 6.0, 10.0])
    @pytest.mark.parametrize("x_w", [0.0, 0.5, 1.0])
    def test_continuous_across_stall_blend(self, params, speed, x_w):
        alphas = np.arange(-math.pi / 2, math.pi / 2, 1e-4)
        c = wing_coefficients(alphas, speed, x_w, params)
        assert np.max(np.abs(np.diff(c.cL))) < 1e-3
        assert np.max(np.abs(np.diff(c.cD))) < 1e-3

    def test_stall_peak_near_stall_angle(self, params):
        alphas = np.radians(np.linspace(0.0, 30.0, 601))
        c = wing_coefficients(alphas, 6.0, 0.0, params)
        peak = math.degrees(alphas[np.argmax(c.cL)])
        assert abs(peak - math.degrees(params.airfoil.alpha_stall)) <= 4.0

    def test_swept_wing_has_lower_lift_slope(self, params):
        a, h = math.radians(5.0), 1e-4

        def slope(x_w):
            return (wing_coefficients(a + h, 5.0, x_w, params).cL - wing_coefficients(a - h, 5.0, x_w, params).cL) / (2 * h)

        assert slope(1.0) < slope(0.0)

    def test_low_reynolds_degrades_lift(self, params):
        alpha = math.radians(8.0)
        assert wing_coefficients(alpha, 4.0, 0.5, params).cL < wing_coefficients(alpha, 6.0, 0.5, params).cL

    @pytest.mark.parametrize("kwargs", [dict(alpha=2.0), dict(speed=-1.0), dict(x_w=1.2)])
    def test_domain_errors(self, params, kwargs):
        args = dict(alpha=0.1, speed=5.0, x_w=0.5)
        args.update(kwargs)
        with pytest.raises(DomainError):
            wing_coefficients(params=params, **args)


class TestSlipstream:
    def test_no_thrust_no_slipstream(self, params):
        assert slipstream_speed(5.0, 0.0, params) == pytest.approx(0.0, abs=1e-12)

    def test_static_value(self, params):
        assert slipstream_speed(0.0, 1.2, params) == pytest.approx(5.18, abs=0.01)

    def test_momentum_balance(self, params):
        u, thrust = 6.0, 0.5
        u_s = slipstream_speed(u, thrust, params)
        disk = params.air.rho * math.pi * params.prop_radius ** 2
        assert 0 < u_s < slipstream_speed(0.0, thrust, params)
        assert 2 * disk * u_s * (u + u_s) == pytest.approx(thrust, rel=1e-9)

    def test_negative_thrust_rejected(self, params):
        with pytest.raises(DomainError):
            slipstream_speed(5.0, -0.1, params)


class TestCenterOfPressure:
    @pytest.mark.parametrize("alpha, fraction", [(0.0, 0.25), (math.pi / 4, 0.375), (math.pi / 2 - 1e-9, 0.5)])
    def test_chordwise_position(self, params, alpha, fraction):
        geo = geometry_at(params, 0.3)
        r = center_of_pressure(alpha, 0.3, params)
        assert geo.x_cg - r[0] == pytest.approx(fraction * geo.mac, rel=1e-6)
        assert r[1] == pytest.approx(-params.cg_z)

    def test_undefined_at_right_angle(self, params):
        with pytest.raises(DomainError):
            center_of_pressure(math.pi / 2, 0.0, params)


class TestLoads:
    def test_zero_airspeed_gives_zero_loads(self, params):
        loads = aero_loads(np.zeros(10), 0.0, params)
        np.testing.assert_allclose(loads.force, 0.0, atol=1e-15)
        assert loads.moment == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_wing_has_no_zero_lift_moment(self, params):
        assert wing_loads(level_state(5.0, 0.1), 0.4, params).tau_w0 == 0.0

    def test_level_flight_lift_matches_single_region(self, params):
        alpha, speed = math.radians(4.0), 5.0
        loads = wing_loads(level_state(speed, alpha), 0.0, params)
        f = loads.f_wing_free + loads.f_wing_slip
        lift = f[0] * math.sin(alpha) - f[1] * math.cos(alpha)
        drag = -f[0] * math.cos(alpha) - f[1] * math.sin(alpha)

        c = wing_coefficients(alpha, speed, 0.0, params)
        dyn = 0.5 * params.air.rho * speed ** 2 * geometry_at(params, 0.0).S_w
        assert lift == pytest.approx(dyn * c.cL, rel=1e-9)
        assert drag == pytest.approx(dyn * c.cD, rel=1e-9)
        assert f[1] < 0

    def test_wing_moment_recomputable_from_parts(self, params):
        loads = wing_loads(level_state(6.0, 0.08, x_w=0.4, q=0.5), 0.6, params)
        expected = cross2(loads.r_cp_free, loads.f_wing_free) + cross2(loads.r_cp_slip, loads.f_wing_slip) + loads.tau_w0
        assert loads.tau_wing == pytest.approx(expected)

    def test_thrust_adds_slipstream_lift(self, params):
        state = level_state(5.0, math.radians(4.0))
        without = wing_loads(state, 0.0, params).f_wing_slip[1]
        with_thrust = wing_loads(state, 0.8, params).f_wing_slip[1]
        assert with_thrust < without < 0

    def test_tail_neutral_at_level_flow(self, params):
        loads = tail_loads(level_state(6.0), 0.0, params)
        np.testing.assert_allclose(loads.f_tail, 0.0, atol=1e-15)

    def test_positive_elevator_pitches_nose_down(self, params):
        loads = tail_loads(level_state(6.0, x_e=0.5), 0.3, params)
        elev = params.elevator
        # lift up on an arm aft of the CG
        assert loads.f_tail[1] < 0
        oracle = elev.tail_arm_z * loads.f_tail[0] - elev.tail_arm_x * loads.f_tail[1]
        assert loads.tau_tail == pytest.approx(oracle)
        assert loads.tau_tail < 0

    def test_breakdown_totals(self, params):
        loads = aero_loads(level_state(6.0, 0.05, x_w=0.2, x_e=0.1), 0.5, params)
        np.testing.assert_allclose(loads.force, loads.f_wing_free + loads.f_wing_slip + loads.f_tail)
        assert loads.moment == pytest.approx(loads.tau_wing + loads.tau_tail + loads.tau_motor)

    def test_batched_evaluation_matches_scalar(self, params):
        states = np.stack([level_state(v, 0.05, x_w=0.5) for v in (4.0, 5.0, 6.0)])
        batched = aero_loads(states, np.full(3, 0.4), params)
        for k in range(3):
            single = aero_loads(states[k], 0.4, params)
            np.testing.assert_allclose(batched.force[k], single.force)
            assert batched.moment[k] == pytest.approx(single.moment)

    def test_literal_slip_drag_uses_freestream_pressure(self, params):
        literal = replace(params, airfoil=replace(params.airfoil, literal_slip_drag=True))
        state = level_state(5.0, math.radians(4.0))
        base = wing_loads(state, 0.8, params)
        alt = wing_loads(state, 0.8, literal)

        def lift_drag(loads):
            a, f = float(loads.alpha_slip), loads.f_wing_slip
            return f[0] * math.sin(a) - f[1] * math.cos(a), -f[0] * math.cos(a) - f[1] * math.sin(a)

        (lift, drag), (lift_lit, drag_lit) = lift_drag(base), lift_drag(alt)
        assert lift_lit == pytest.approx(lift, rel=1e-9)
        u, w = state[3], state[4]
        ratio = (u ** 2 + w ** 2) / ((u + float(base.u_slip)) ** 2 + w ** 2)
        assert drag_lit == pytest.approx(ratio * drag, rel=1e-9)
        np.testing.assert_allclose(alt.f_wing_free, base.f_wing_free)


def test_aero_curves_layout(params):
    frame = aero_curves(params)
    assert list(frame.columns) == ['sweep_deg', 'speed', 'alpha_deg', 'cL', 'cD', 'cM']
    assert len(frame) == 99 * 2 * 3
    at_zero = frame[frame['alpha_deg'].abs() < 1e-9]
    np.testing.assert_allclose(at_zero['cL'], 0.0, atol=1e-12)
