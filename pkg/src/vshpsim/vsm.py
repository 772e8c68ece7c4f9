"""Virtual synchronous machine: voltage control, electrical model, inertia model.

The VSM works in its own rotating frame at angle ``theta``.  Phasors in that
frame use the ordinary ``d + jq`` form; conversion to the network frame is a
rotation by ``e^{j theta}``.  The supplementary PD and PID controllers feed the
power reference and read the grid speed from a PLL.
"""
from __future__ import annotations

import cmath
from dataclasses import dataclass

from .blocks import filtered_derivative, lowpass
from .vsg import droop_error, pid_power


class DegenerateImpedance(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class VSMState:
    omega: float = 1.0
    theta: float = 0.0
    x_v: float = 1.0       # voltage PI integrator
    q_f: float = 0.0       # filtered reactive power
    v0d: float = 1.0       # filtered terminal voltage, VSM frame
    v0q: float = 0.0
    x_d: float = 1.0       # damping low-pass of omega
    x_trim: float = 0.0    # power-reference trim
    z_d: float = 0.0       # supplementary derivative filter
    x_i: float = 0.0       # supplementary integrator
    p_f: float = 0.0       # filtered output-power deviation


def vsm_voltage_control(v_g: complex, q_g: float, v_ref: float, q_ref: float, x_v: float, q_f: float, cfg):
    """EMF magnitude and (dx_v, dq_f).

    The summed error is voltage deficit plus k_q times filtered reactive
    deficit; the k_ffe feed-forward taps the measured voltage magnitude.
    """
    mag = abs(v_g)
    err = (v_ref - mag) + cfg["k_q"] * (q_ref - q_f)
    v_e = x_v + cfg["k_pv"] * err + cfg["k_ffe"] * mag
    return v_e, cfg["k_iv"] * err, cfg["w_qf"] * (q_g - q_f)


def vsm_electrical_model(v_e: float, theta: float, v0: complex, omega: float, v_g: complex, cfg):
    """Converter current (network frame) and the (p_g, q_g) it produces at v_g.

    ``v0`` is the low-pass filtered terminal voltage in the VSM frame.
    """
    z = complex(cfg["r_s"], omega * cfg["l_s"])
    if abs(z) ** 2 <= 1e-12:
        raise DegenerateImpedance("virtual impedance is zero")
    i_vsm = (v_e - v0) / z
    i_s = i_vsm * cmath.exp(1j * theta)
    s = v_g * i_s.conjugate()
    return i_s, s.real, s.imag


def voltage_filter_derivative(v_g: complex, theta: float, v0: complex, cfg) -> complex:
    return cfg["w_vf"] * (v_g * cmath.exp(-1j * theta) - v0)


def vsm_swing_step(p_ref_total: float, p_g: float, omega: float, x_d: float, k_w: float, cfg,
                   w_b: float, omega_ref: float = 1.0):
    """(domega, dtheta, dx_d, p_r_star) of the inertia model."""
    p_r = p_ref_total + k_w * (omega_ref - omega)
    domega = (p_r - p_g - cfg["k_d"] * (omega - x_d)) / cfg["T_a"]
    return domega, w_b * (omega - 1.0), cfg["w_d"] * (omega - x_d), p_r


def trim_derivative(p_target: float, p_g: float, cfg) -> float:
    """Slow trim that returns p_g to its target, cancelling the k_w droop in steady state."""
    return lowpass(p_target, p_g, cfg["T_trim"])


def vsm_pd_supplement(omega_g: float, z_d: float, cfg) -> tuple[float, float]:
    d_omega = cfg["omega_ref"] - omega_g
    y_d, dz = filtered_derivative(d_omega, z_d, cfg["k_vsm_pd_d"], cfg["w_vsm_pd"])
    return cfg["k_vsm_pd_p"] * d_omega + y_d, dz


def vsm_pid_supplement(omega_g: float, p_f: float, z_d: float, x_i: float, cfg):
    """(p_vsm_pid, dz_d, dx_i); p_f is the filtered power deviation."""
    eps = droop_error(omega_g, p_f, cfg)
    p, dz = pid_power(eps, z_d, x_i, cfg["k_vsm_pid_p"], cfg["k_vsm_pid_d"], cfg["w_vsm_pid"])
    return p, dz, cfg["k_vsm_pid_i"] * eps
