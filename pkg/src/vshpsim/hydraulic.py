"""Waterway, surge tank, turbine, governor and lumped shaft of the VSHP unit.

Rigid water columns for tunnel and penstock, a lumped surge tank between
them, a simple q-h-p turbine law and a PI speed governor acting on the
guide vanes through a rate-limited first-order servo.  All quantities are
per unit on the unit rating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

G_FLOOR = 1e-6


class GuideVaneClosedWithFlow(ValueError):
    pass


@dataclass(frozen=True)
class HydraulicParams:
    T_wt: float = 1.5
    T_wp: float = 0.3
    C_s: float = 100.0
    f_t: float = 0.01
    f_p: float = 0.01
    h_0: float = 1.0
    H_t: float = 4.0
    T_g: float = 0.2
    g_rate: float = 0.1
    k_p_gov: float = 2.0
    k_i_gov: float = 0.4
    T_aw: float = 1.0
    omega_ref: float = 1.0

    def __post_init__(self):
        for name in ("T_wt", "T_wp", "C_s", "H_t", "T_g", "g_rate", "T_aw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.f_t < 0 or self.f_p < 0:
            raise ValueError("friction coefficients must be non-negative")
        if not 0.7 <= self.omega_ref <= 1.3:
            raise ValueError("omega_ref outside the plant operating envelope [0.7, 1.3]")


@dataclass
class HydraulicState:
    q_t: float
    q_p: float
    h_st: float
    g: float
    omega_t: float
    x_gov: float

    FIELDS = ("q_t", "q_p", "h_st", "g", "omega_t", "x_gov")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS])

    @classmethod
    def from_array(cls, x) -> "HydraulicState":
        return cls(*map(float, x))


def turbine_head(q_p: float, g: float) -> float:
    g = max(g, G_FLOOR)
    return (q_p / g) ** 2


def turbine_power(q_p: float, g: float) -> float:
    if q_p == 0.0:
        return 0.0
    return q_p * turbine_head(q_p, g)


def waterway_derivatives(s: HydraulicState, p: HydraulicParams) -> tuple[float, float, float]:
    """(dq_t, dq_p, dh_st)."""
    if s.g < 1e-6 and s.q_p > 1e-3:
        raise GuideVaneClosedWithFlow(f"guide vane closed (g={s.g:.2e}) with penstock flow {s.q_p:.3f}")
    h_turb = turbine_head(s.q_p, s.g)
    dq_t = (p.h_0 - s.h_st - p.f_t * s.q_t * abs(s.q_t)) / p.T_wt
    dq_p = (s.h_st - h_turb - p.f_p * s.q_p * abs(s.q_p)) / p.T_wp
    dh_st = (s.q_t - s.q_p) / p.C_s
    return dq_t, dq_p, dh_st


def governor_step(omega_t: float, omega_ref: float, s: HydraulicState, p: HydraulicParams):
    """Guide-vane reference, servo rate dg/dt and integrator rate.

    The reference is limited to the stroke range [0, 1] before the servo, so
    the vanes approach a stop smoothly instead of striking it.  The servo
    velocity is clipped to +-g_rate.  Anti-windup is back-calculation: the
    amount by which the raw reference exceeds the stroke range bleeds the
    integrator with time constant T_aw, which keeps the right-hand side
    continuous.
    """
    err = omega_ref - omega_t
    g_raw = p.k_p_gov * err + s.x_gov
    g_ref = min(max(g_raw, 0.0), 1.0)
    dg = float(np.clip((g_ref - s.g) / p.T_g, -p.g_rate, p.g_rate))
    if (s.g >= 1.0 and dg > 0.0) or (s.g <= 0.0 and dg < 0.0):
        dg = 0.0
    dx = p.k_i_gov * err + (g_ref - g_raw) / p.T_aw
    return g_ref, dg, dx


def shaft_derivative(p_m: float, p_g: float, omega_t: float, H_t: float) -> float:
    return (p_m - p_g) / (2.0 * H_t * omega_t)


def hydraulic_derivatives(s: HydraulicState, p_g: float, p: HydraulicParams) -> np.ndarray:
    """All hydraulic-state derivatives in HydraulicState.FIELDS order."""
    dq_t, dq_p, dh_st = waterway_derivatives(s, p)
    _, dg, dx = governor_step(s.omega_t, p.omega_ref, s, p)
    dw = shaft_derivative(turbine_power(s.q_p, s.g), p_g, s.omega_t, p.H_t)
    return np.array([dq_t, dq_p, dh_st, dg, dw, dx])


def hydraulic_steady_state(p_m: float, p: HydraulicParams) -> HydraulicState:
    """Operating point delivering ``p_m`` at the reference speed."""
    loss = p.f_t + p.f_p
    # p_m = q (h_0 - loss q^2); take the branch below the power maximum
    q_max = np.sqrt(p.h_0 / (3 * loss)) if loss > 0 else 10.0
    p_max = q_max * (p.h_0 - loss * q_max ** 2)
    if not 0 <= p_m < p_max:
        raise ValueError(f"turbine power {p_m} not attainable (max {p_max:.3f})")
    q = brentq(lambda q: q * (p.h_0 - loss * q * q) - p_m, 0.0, q_max) if p_m > 0 else 0.0
    h_st = p.h_0 - p.f_t * q * q
    h_turb = h_st - p.f_p * q * q
    g = q / np.sqrt(h_turb) if q > 0 else 0.0
    if g > 1.0:
        raise ValueError(f"operating point needs guide vane opening {g:.3f} > 1")
    return HydraulicState(q_t=q, q_p=q, h_st=h_st, g=g, omega_t=p.omega_ref, x_gov=g)
