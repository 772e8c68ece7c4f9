import cmath

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vshpsim import assemble_system, find_equilibrium, run_scenario, Scenario, LoadEvent
from vshpsim.blocks import filtered_derivative
from vshpsim.controllers import VIControllerConfig
from vshpsim.vsm import (
    DegenerateImpedance, vsm_electrical_model, vsm_pd_supplement, vsm_pid_supplement, vsm_swing_step,
    vsm_voltage_control,
)

VSM = VIControllerConfig("VSM")
VSM_PD = VIControllerConfig("VSM-PD")
VSM_PID = VIControllerConfig("VSM-PID")
W_B = VSM.w_b


# ---- voltage control -------------------------------------------------------------

def test_voltage_control_steady():
    v_e, dxv, dqf = vsm_voltage_control(1.02 + 0j, 0.1, 1.02, 0.1, 1.07, 0.1, VSM)
    assert v_e == 1.07 and dxv == 0.0 and dqf == 0.0


def test_voltage_control_reactive_droop():
    v_e, dxv, _ = vsm_voltage_control(1.0 + 0j, 0.0, 1.0, 0.2, 1.0, 0.0, VSM)
    # error contribution k_q * 0.2 = 0.02
    assert dxv == pytest.approx(VSM["k_iv"] * 0.02)
    assert v_e - 1.0 == pytest.approx(VSM["k_pv"] * 0.02)


def test_voltage_control_no_feedforward():
    assert VSM["k_ffe"] == 0.0
    a, _, _ = vsm_voltage_control(0.9 + 0j, 0.0, 1.0, 0.0, 1.0, 0.0, VSM)
    assert a == pytest.approx(1.0 + VSM["k_pv"] * 0.1)


# ---- electrical model --------------------------------------------------------------

def test_electrical_model_zero_current():
    i_s, p, q = vsm_electrical_model(1.0, 0.3, 1.0 + 0j, 1.0, cmath.exp(0.3j), VSM)
    assert abs(i_s) == 0.0 and p == 0.0 and q == 0.0


def test_electrical_model_example():
    i_s, _, _ = vsm_electrical_model(1.05, 0.0, 1.0 + 0j, 1.0, 1.0 + 0j, VSM)
    assert i_s == pytest.approx(0.05 / (0.01 + 0.25j))
    assert i_s.real == pytest.approx(0.00799, abs=1e-5)
    assert i_s.imag == pytest.approx(-0.19968, abs=1e-5)


def test_electrical_model_linear_in_voltage_difference():
    a, _, _ = vsm_electrical_model(1.05, 0.2, 1.0 + 0.01j, 1.0, 1.0 + 0j, VSM)
    b, _, _ = vsm_electrical_model(1.10, 0.2, 1.0 + 0.02j, 1.0, 1.0 + 0j, VSM)
    # 1.10 - (1.0 + 0.02j) = 2 * (1.05 - (1.0 + 0.01j))
    assert b == pytest.approx(2 * a)


def test_degenerate_impedance():
    cfg = VIControllerConfig("VSM", {"r_s": 0.0, "l_s": 0.0})
    with pytest.raises(DegenerateImpedance):
        vsm_electrical_model(1.0, 0.0, 1.0 + 0j, 1.0, 1.0 + 0j, cfg)


# ---- swing equation ------------------------------------------------------------------

def test_swing_equilibrium():
    d = vsm_swing_step(0.75, 0.75, 1.0, 1.0, VSM.k_w, VSM, W_B)
    assert d[:3] == (0.0, 0.0, 0.0)


def test_swing_acceleration():
    domega, _, _, _ = vsm_swing_step(0.75, 0.35, 1.0, 1.0, VSM.k_w, VSM, W_B)
    assert domega == pytest.approx(0.1)


def test_swing_damping_power():
    domega, _, _, _ = vsm_swing_step(0.75, 0.75, 1.001, 1.0, 0.0, VSM, W_B)
    assert -domega * VSM["T_a"] == pytest.approx(0.04)


def test_damping_washout_zero_dc_gain():
    """Transfer from omega to damping power k_d (omega - x_d) with dx_d = w_d (omega - x_d)."""
    k_d, w_d = VSM["k_d"], VSM["w_d"]

    def response(w):
        # x_d = w_d/(s + w_d) omega  =>  damping = k_d s/(s + w_d) omega
        return k_d * (1 - w_d / (1j * w + w_d))

    assert abs(response(0.0)) == 0.0
    assert abs(response(1e6)) == pytest.approx(k_d, rel=1e-5)


@given(st.floats(0.9, 1.1))
def test_angle_consistency(omega):
    _, dtheta, _, _ = vsm_swing_step(0.5, 0.5, omega, omega, 0.0, VSM, W_B)
    assert (dtheta == 0.0) == (omega == 1.0)


def test_variant_gain_override():
    assert VSM.k_w == 20.0 and VSM_PD.k_w == 200.0 and VSM_PID.k_w == 2000.0
    assert VSM.w_b == pytest.approx(2 * np.pi * 50)


# ---- supplementary controllers -------------------------------------------------------

def test_pd_zero_at_nominal():
    p, dz = vsm_pd_supplement(1.0, 0.0, VSM_PD)
    assert p == 0.0 and dz == 0.0


def test_pd_proportional():
    omega_g = 1.0 - 0.002
    p, dz = vsm_pd_supplement(omega_g, 1.0 - omega_g, VSM_PD)  # derivative filter settled
    assert dz == 0.0
    assert p == pytest.approx(0.2)


def test_pd_ramp_response():
    """Ramp of the deviation at 0.01 pu/s: derivative term tends to k_d * 0.01 = 5 pu."""
    dt, z = 1e-3, 0.0
    k, T = VSM_PD["k_vsm_pd_d"], VSM_PD["w_vsm_pd"]
    for n in range(15000):
        u = 0.01 * n * dt
        y, dz = filtered_derivative(u, z, k, T)
        z += dz * dt
    assert y == pytest.approx(5.0, rel=1e-3)


def test_pid_steady_when_eps_zero():
    p1, dz, dxi = vsm_pid_supplement(1.0, 0.0, 0.0, 0.3, VSM_PID)
    assert p1 == 0.3 and dz == 0.0 and dxi == 0.0


def test_pid_integral_accumulation():
    x_i = 0.0
    for _ in range(1000):
        _, _, dxi = vsm_pid_supplement(1.0 - 1e-4, 0.0, -1e-4, x_i, VSM_PID)
        x_i += dxi * 1e-3
    assert x_i == pytest.approx(0.0476)


def test_pid_droop_fixed_point():
    # steady state of the integrator: omega* - omega_g = R p_f
    p_f = 0.3
    omega_g = 1.0 - VSM_PID["R_d"] * p_f
    _, _, dxi = vsm_pid_supplement(omega_g, p_f, 0.0, 0.0, VSM_PID)
    assert dxi == pytest.approx(0.0, abs=1e-12)


# ---- system level --------------------------------------------------------------------

def test_vsm_equilibrium_frame():
    model = assemble_system(controller="VSM")
    x = find_equilibrium(model).state
    assert x["vsm.omega"] == 1.0 or abs(x["vsm.omega"] - 1.0) < 1e-12
    sig = model.signals(x.x)
    assert sig["p_r_star"] == pytest.approx(sig["p_g"], abs=1e-9)
    assert x["vsm.omega"] - x["vsm.x_d"] == pytest.approx(0.0, abs=1e-12)


def test_vsm_pd_zero_gains_reproduces_vsm():
    """VSM-PD with its supplementary gains at zero and the base k_w follows plain VSM."""
    vsm = assemble_system(controller="VSM")
    pd = assemble_system(controller=VIControllerConfig(
        "VSM-PD", {"k_vsm_pd_p": 0.0, "k_vsm_pd_d": 0.0, "k_w_vsm_pd": VSM["k_w"]}))
    sc = Scenario(duration=2.0, dt=0.001, events=(LoadEvent(7, 0.5, 0.5),), sample_period=0.01,
                  signals=("f", "p_g", "omega_vsm", "omega_t"))
    a, b = run_scenario(vsm, sc), run_scenario(pd, sc)
    for name in sc.signals:
        assert np.abs(a[name] - b[name]).max() < 1e-9
