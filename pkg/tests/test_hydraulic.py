import numpy as np
import pytest
from hypothesis import given, strategies as st

from vshpsim.blocks import trapezoid_step
from vshpsim.hydraulic import (
    GuideVaneClosedWithFlow, HydraulicParams, HydraulicState, governor_step, hydraulic_derivatives,
    hydraulic_steady_state, shaft_derivative, turbine_head, turbine_power, waterway_derivatives,
)

LOSSLESS = HydraulicParams(f_t=0.0, f_p=0.0)


def state(**kw):
    base = dict(q_t=1.0, q_p=1.0, h_st=1.0, g=1.0, omega_t=1.0, x_gov=1.0)
    base.update(kw)
    return HydraulicState(**base)


def test_waterway_rated_lossless_equilibrium():
    assert waterway_derivatives(state(), LOSSLESS) == (0.0, 0.0, 0.0)


def test_surge_tank_rate():
    _, _, dh = waterway_derivatives(state(q_t=1.0, q_p=0.9, g=0.9), LOSSLESS)
    assert dh == pytest.approx(0.001)


def test_unit_turbine_head_when_flow_matches_opening():
    s = state(q_t=0.8, q_p=0.8, g=0.8)
    assert turbine_head(0.8, 0.8) == pytest.approx(1.0)
    assert waterway_derivatives(s, LOSSLESS)[1] == pytest.approx(0.0)


def test_turbine_power():
    assert turbine_power(1.0, 1.0) == 1.0
    assert turbine_power(0.8, 0.8) == pytest.approx(0.8)
    assert turbine_power(0.0, 0.5) == 0.0


def test_closed_vane_with_flow_rejected():
    with pytest.raises(GuideVaneClosedWithFlow):
        waterway_derivatives(state(g=0.0, q_p=0.5), LOSSLESS)


def test_governor_holds_at_reference():
    _, dg, dx = governor_step(1.0, 1.0, state(g=0.7, x_gov=0.7), HydraulicParams())
    assert dg == 0.0 and dx == 0.0


def test_governor_rate_limit():
    p = HydraulicParams(T_g=0.2, g_rate=0.1)
    g_ref, dg, _ = governor_step(1.0, 1.0, state(g=0.0, x_gov=1.0), p)
    assert g_ref - 0.0 == 1.0
    assert dg == pytest.approx(0.1)


def test_governor_sign():
    p = HydraulicParams()
    s = state(g=0.7, x_gov=0.7)
    g_ref, _, dx = governor_step(1.02, 1.0, s, p)
    assert g_ref < 0.7 and dx < 0


def test_shaft_derivative():
    assert shaft_derivative(0.5, 0.5, 1.0, 4.0) == 0.0
    assert shaft_derivative(0.4, 0.0, 1.0, 4.0) == pytest.approx(0.05)
    assert shaft_derivative(0.5, 0.6, 1.0, 4.0) < 0


def test_parameter_validation():
    with pytest.raises(ValueError):
        HydraulicParams(T_g=0.0)
    with pytest.raises(ValueError):
        HydraulicParams(f_t=-0.1)


def test_steady_state_invariants():
    p = HydraulicParams()
    s = hydraulic_steady_state(0.75, p)
    assert s.q_t == s.q_p
    assert s.h_st <= p.h_0
    assert turbine_power(s.q_p, s.g) == pytest.approx(0.75)
    assert np.abs(hydraulic_derivatives(s, 0.75, p)).max() < 1e-12


@given(st.floats(0.0, 1.0), st.floats(-2.0, 3.0), st.floats(0.9, 1.1))
def test_servo_bounded(g, x_gov, omega):
    p = HydraulicParams()
    g_ref, dg, _ = governor_step(omega, 1.0, state(g=g, x_gov=x_gov), p)
    assert 0.0 <= g_ref <= 1.0
    assert abs(dg) <= p.g_rate + 1e-15
    if g >= 1.0:
        assert dg <= 0.0
    if g <= 0.0:
        assert dg >= 0.0


@given(st.floats(0.3, 0.9), st.floats(0.01, 0.5))
def test_energy_direction(p_m, excess):
    """With the governor frozen and p_g > p_m the turbine decelerates."""
    assert shaft_derivative(p_m, p_m + excess, 1.0, 4.0) < 0


def test_surge_tank_mass_balance():
    p = HydraulicParams()
    s0 = hydraulic_steady_state(0.75, p)
    x = s0.as_array()
    dt, n = 0.01, 2000
    integral = 0.0
    h0 = x[2]
    for _ in range(n):
        y = trapezoid_step(lambda z: hydraulic_derivatives(HydraulicState.from_array(z), 0.5, p), x, dt)
        integral += 0.5 * dt * ((x[0] - x[1]) + (y[0] - y[1]))
        x = y
        assert 0.0 <= x[3] <= 1.0
    assert integral == pytest.approx(p.C_s * (x[2] - h0), abs=1e-9)
