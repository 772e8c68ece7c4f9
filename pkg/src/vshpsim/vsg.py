"""Current-controlled converter paths: PLL, CPC, VSG, VSG-PID, reactive PI, current loop.

dq convention: the q axis lags d, so a network phasor is ``(x_d - j x_q) e^{j theta}``.
With it p = v_d i_d + v_q i_q and q = v_d i_q - v_q i_d, which makes the
d-axis current inversion ``(v_d p - v_q q)/|v|^2`` exact.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace

import numpy as np

from .blocks import filtered_derivative, trapezoid_step


class LowVoltagePLL(RuntimeError):
    pass


class LowVoltageDivision(ZeroDivisionError):
    pass


def to_dq(phasor: complex, theta: float) -> tuple[float, float]:
    z = phasor * cmath.exp(-1j * theta)
    return z.real, -z.imag


def from_dq(d: float, q: float, theta: float) -> complex:
    return complex(d, -q) * cmath.exp(1j * theta)


def dq_power(v_c: tuple[float, float], i: tuple[float, float]) -> tuple[float, float]:
    vd, vq = v_c
    i_d, i_q = i
    return vd * i_d + vq * i_q, vd * i_q - vq * i_d


def current_inversion(vd: float, vq: float, p: float, q: float) -> tuple[float, float]:
    """(i_d, i_q) delivering p and q at converter voltage (vd, vq)."""
    v2 = vd * vd + vq * vq
    if v2 <= 0.01:
        raise LowVoltageDivision(f"|v_c| = {math.sqrt(v2):.3f} pu too low for current inversion")
    return (vd * p - vq * q) / v2, (vq * p + vd * q) / v2


# --------------------------------------------------------------------------
# PLL

@dataclass(frozen=True)
class PLLParams:
    kp: float = 0.8
    ki: float = 50.0
    T_f: float = 0.001
    w_b: float = 2 * math.pi * 50


@dataclass(frozen=True)
class PLLState:
    theta: float
    x_i: float = 0.0
    omega: float = 1.0
    frozen: bool = False


def pll_derivatives(v_g: complex, theta: float, x_i: float, omega: float, p: PLLParams):
    """(dtheta, dx_i, domega) of the synchronous-reference-frame PLL.

    The phase detector is the normalised q-axis voltage, so the loop gain
    does not depend on the voltage magnitude.
    """
    mag = abs(v_g)
    if mag <= 0.1:
        return 0.0, 0.0, 0.0
    err = (v_g * cmath.exp(-1j * theta)).imag / mag
    dw = p.kp * err + x_i
    return p.w_b * dw, p.ki * err, (1.0 + dw - omega) / p.T_f


def pll_step(v_g: complex, s: PLLState, p: PLLParams, dt: float) -> tuple[PLLState, float]:
    """Advance the PLL by dt with v_g held; returns the new state and omega_g.

    Below 0.1 pu the estimate is frozen and the state is flagged.
    """
    if abs(v_g) <= 0.1:
        return replace(s, frozen=True), s.omega
    x = trapezoid_step(lambda y: pll_derivatives(v_g, y[0], y[1], y[2], p),
                       np.array([s.theta, s.x_i, s.omega]), dt)
    new = PLLState(theta=float(x[0]), x_i=float(x[1]), omega=float(x[2]))
    return new, new.omega


# --------------------------------------------------------------------------
# active power paths

@dataclass(frozen=True)
class VSGState:
    z_d: float = 0.0     # derivative-filter low-pass state
    x_i: float = 0.0     # PID integrator (VSG-PID)
    p_f: float = 0.0     # filtered output power
    x_cpc: float = 0.0   # CPC integrator
    x_q: float = 0.0     # reactive PI integrator


def cpc_step(p_g: float, p_ref: float, s: VSGState, cfg, dt: float) -> tuple[float, VSGState]:
    err = p_ref - p_g
    i_d_ref = cfg["k_Pp"] * err + s.x_cpc
    return i_d_ref, replace(s, x_cpc=s.x_cpc + cfg["k_Pi"] * err * dt)


def _tustin_lowpass(z: float, u: float, w: float, dt: float) -> float:
    a = 0.5 * w * dt
    return (z * (1 - a) + 2 * a * u) / (1 + a)


def vsg_power(d_omega: float, p_ref: float, z_d: float, cfg) -> tuple[float, float]:
    """p_vsg and dz_d/dt."""
    y_d, dz = filtered_derivative(d_omega, z_d, cfg["k_vsg_d"], cfg["w_vsg"])
    return cfg["k_vsg_p"] * d_omega + y_d + p_ref, dz


def vsg_reference(d_omega: float, p_ref: float, q_g: float, v_c: tuple[float, float],
                  s: VSGState, cfg, dt: float) -> tuple[float, VSGState]:
    p_vsg, _ = vsg_power(d_omega, p_ref, s.z_d, cfg)
    i_d_ref, _ = current_inversion(v_c[0], v_c[1], p_vsg, q_g)
    z = _tustin_lowpass(s.z_d, d_omega, 1.0 / cfg["w_vsg"], dt)
    return i_d_ref, replace(s, z_d=z)


def droop_error(omega_g: float, p_f: float, cfg) -> float:
    """omega* - omega_g - R p_f, with p_f the filtered deviation of p_g from its set-point."""
    return cfg["omega_ref"] - omega_g - cfg["R_d"] * p_f


def pid_power(eps: float, z_d: float, x_i: float, kp: float, kd: float, T: float) -> tuple[float, float]:
    """PID output (without set-point) and dz_d/dt."""
    y_d, dz = filtered_derivative(eps, z_d, kd, T)
    return kp * eps + y_d + x_i, dz


def vsg_pid_reference(omega_g: float, p_f: float, p_ref: float, q_g: float, v_c: tuple[float, float],
                      s: VSGState, cfg, dt: float) -> tuple[float, VSGState]:
    eps = droop_error(omega_g, p_f, cfg)
    p_pid, _ = pid_power(eps, s.z_d, s.x_i, cfg["k_vsg_pid_p"], cfg["k_vsg_pid_d"], cfg["w_vsg_pid"])
    i_d_ref, _ = current_inversion(v_c[0], v_c[1], p_pid + p_ref, q_g)
    z = _tustin_lowpass(s.z_d, eps, 1.0 / cfg["w_vsg_pid"], dt)
    return i_d_ref, replace(s, z_d=z, x_i=s.x_i + cfg["k_vsg_pid_i"] * eps * dt)


def reactive_current_reference(q_g: float, q_ref: float, v_c: tuple[float, float], s: VSGState,
                               cfg, dt: float) -> tuple[float, VSGState]:
    if math.hypot(*v_c) <= 0.1:
        raise LowVoltageDivision("converter voltage too low for reactive control")
    err = q_ref - q_g
    return cfg["k_pq"] * err + s.x_q, replace(s, x_q=s.x_q + cfg["k_iq"] * err * dt)


# --------------------------------------------------------------------------
# inner current loop

@dataclass(frozen=True)
class CurrentInjection:
    i_d_ref: float
    i_q_ref: float
    i_d: float
    i_q: float
    T_lag: float = 0.005
    limit: float = 1.2
    saturated: bool = False


LIMITER_KNEE = 0.05  # half-width of the limiter knee as a fraction of the limit


def limited_magnitude(mag: float, limit: float, knee: float = LIMITER_KNEE) -> tuple[float, float]:
    """Limited current magnitude and its slope d(out)/d(mag).

    The identity below ``limit - w`` and exactly ``limit`` above ``limit + w``
    (w = knee * limit), joined by a quartic whose value, slope and curvature
    match at both ends.  The resulting right-hand side is twice continuously
    differentiable, which the trapezoidal rule needs to keep its second-order
    error on trajectories that run into the limit.
    """
    w = knee * limit
    a = limit - w
    if mag <= a:
        return mag, 1.0
    if mag >= limit + w:
        return limit, 0.0
    t = (mag - a) / (2.0 * w)
    return a + 2.0 * w * (t - t ** 3 + 0.5 * t ** 4), 1.0 - 3.0 * t * t + 2.0 * t ** 3


def saturate(i_d_ref: float, i_q_ref: float, limit: float) -> tuple[float, float, bool]:
    """Magnitude limiting that preserves the angle of the reference.

    The flag is set once the reference enters the limiter knee.
    """
    mag = math.hypot(i_d_ref, i_q_ref)
    out, slope = limited_magnitude(mag, limit)
    if slope == 1.0:
        return i_d_ref, i_q_ref, False
    k = out / mag
    return i_d_ref * k, i_q_ref * k, True


def integrator_gate(mag: float, limit: float) -> float:
    """Rate multiplier for the outer-loop integrators.

    It equals the limiter's incremental gain: 1 below the knee, falling
    smoothly to 0 where the injection is at the limit, so the integrators are
    clamped whenever the injection saturates.
    """
    return limited_magnitude(mag, limit)[1]


def current_derivatives(i_d_ref, i_q_ref, i_d, i_q, T_lag, limit):
    rd, rq, sat = saturate(i_d_ref, i_q_ref, limit)
    return (rd - i_d) / T_lag, (rq - i_q) / T_lag, sat


def current_injection_step(c: CurrentInjection, theta: float, dt: float) -> tuple[CurrentInjection, complex]:
    """Advance the lag by dt (exact for held references) and rotate to the network frame."""
    rd, rq, sat = saturate(c.i_d_ref, c.i_q_ref, c.limit)
    decay = math.exp(-dt / c.T_lag)
    i_d = rd + (c.i_d - rd) * decay
    i_q = rq + (c.i_q - rq) * decay
    new = replace(c, i_d=i_d, i_q=i_q, saturated=sat)
    return new, from_dq(i_d, i_q, theta)
