"""Acceptance criteria 1-11.  Each test records one PASS/FAIL line in the terminal summary."""
import math
import time

import numpy as np
import pytest

from vshpsim import SCHEMES, TABLE_I, LoadEvent, Scenario, assemble_system, find_equilibrium, run_scenario
from vshpsim.controllers import VIControllerConfig, default_parameters
from vshpsim.engine import TrapezoidalIntegrator
from vshpsim.smallsignal import linear_response, numerical_jacobian
from vshpsim.vsg import current_inversion, dq_power

from conftest import EVENT_TIME

P_STAR = 0.75   # VSHP power reference, pu on the unit rating
DROOP = ("VSG", "VSG-PID", "VSM-PD", "VSM-PID")


def final(ts, name):
    return float(ts[name][-1])


# ---- 1 ----------------------------------------------------------------------------

def test_c01_equilibrium_hold(verdict):
    worst, slowest = {}, {}
    for scheme in SCHEMES:
        model = assemble_system(controller=scheme)
        x0 = find_equilibrium(model).state.x
        integ = TrapezoidalIntegrator(model, 0.001)
        x, fx = x0, model.rhs(x0)
        drift = 0.0
        start = time.perf_counter()
        for _ in range(60000):
            x, fx = integ.step(x, fx)
            drift = max(drift, float(np.abs(x - x0).max()))
        slowest[scheme] = time.perf_counter() - start
        worst[scheme] = drift
    ok = max(worst.values()) <= 1e-7 and max(slowest.values()) < 30.0
    detail = ", ".join(f"{s} {worst[s]:.1e}/{slowest[s]:.1f}s" for s in SCHEMES)
    verdict(1, ok, f"60 s drift/runtime: {detail}")


# ---- 2 ----------------------------------------------------------------------------

def test_c02_vsm_power_restored(event_runs, verdict):
    ts = event_runs["VSM"]
    dp = abs(final(ts, "p_g") - P_STAR)
    df = abs(final(ts, "f") - 1.0)
    verdict(2, dp < 0.01 and df >= 0.001, f"VSM |p_g - p_g*| = {dp:.2e}, final |df| = {df:.4f}")


# ---- 3 ----------------------------------------------------------------------------

def test_c03_vsg_droop(event_runs, verdict):
    ts = event_runs["VSG"]
    k = default_parameters("VSG")["k_vsg_p"]
    dp = final(ts, "p_g") - P_STAR
    expected = k * (1.0 - final(ts, "omega_g"))
    err = abs(dp - expected) / abs(expected)
    verdict(3, err < 0.02, f"VSG dp_g = {dp:.4f}, k_vsg_p*dw_g = {expected:.4f}, rel. error {err:.2%}")


# ---- 4 ----------------------------------------------------------------------------

def test_c04_integral_droop_identity(event_runs, verdict):
    r = default_parameters("VSG-PID")["R_d"]
    res = {}
    for scheme in ("VSG-PID", "VSM-PID"):
        ts = event_runs[scheme]
        res[scheme] = abs(1.0 - final(ts, "omega_g") - r * final(ts, "p_f"))
    verdict(4, max(res.values()) < 1e-5,
            ", ".join(f"{s} |w* - w_g - R p_f| = {v:.1e}" for s, v in res.items()))


# ---- 5 ----------------------------------------------------------------------------

def test_c05_frequency_nadir_ordering(event_runs, verdict):
    peak = {s: float(np.abs(event_runs[s]["f"] - 1.0).max()) for s in ("CPC", "VSG", "VSM")}
    ok = peak["VSG"] < peak["CPC"] and peak["VSG"] <= peak["VSM"]
    verdict(5, ok, "max|df|: " + ", ".join(f"{s} {v:.5f}" for s, v in peak.items()))


# ---- 6 ----------------------------------------------------------------------------

def _entry(comparison, label, scheme):
    return next(e for e in comparison if e.label == label and e.scheme == scheme)


def test_c06_interarea_damping(comparison, verdict):
    cpc, vsg = _entry(comparison, "interarea", "CPC"), _entry(comparison, "interarea", "VSG")
    ratio = vsg.mode.zeta / cpc.mode.zeta
    ok = ratio >= 1.5 and vsg.mode.f_hz < cpc.mode.f_hz
    verdict(6, ok, f"interarea zeta VSG/CPC = {ratio:.3f} ({vsg.mode.zeta:.4f}/{cpc.mode.zeta:.4f}), "
                   f"f {vsg.mode.f_hz:.4f} Hz vs {cpc.mode.f_hz:.4f} Hz")


# ---- 7 ----------------------------------------------------------------------------

def test_c07_local_modes_unchanged(comparison, verdict):
    shifts = []
    for label in ("local-area1", "local-area2"):
        ref = _entry(comparison, label, "CPC").mode
        for scheme in SCHEMES:
            m = _entry(comparison, label, scheme).mode
            if m is None:
                shifts.append((float("inf"), label, scheme))
                continue
            shifts.append((max(abs(m.zeta / ref.zeta - 1), abs(m.f_hz / ref.f_hz - 1)), label, scheme))
    worst = max(shifts)
    verdict(7, worst[0] < 0.10, f"largest local-mode shift {worst[0]:.1%} ({worst[1]}, {worst[2]})")


# ---- 8 ----------------------------------------------------------------------------

def test_c08_vshp_sg1_mode(comparison, verdict):
    found = {s: _entry(comparison, "vshp-sg1", s) for s in SCHEMES}
    parts = []
    for s, e in found.items():
        parts.append(f"{s} {e.mode.f_hz:.3f} Hz" if e.status == "ok" else f"{s} {e.status}")
    ok = all(e.status == "ok" for e in found.values())
    verdict(8, ok, "VSHP-SG1 mode: " + ", ".join(parts))


# ---- 9 ----------------------------------------------------------------------------

def test_c09_turbine_speed_recovery(event_runs, verdict):
    late = {}
    for s in DROOP:
        ts = event_runs[s]
        window = ts.t >= EVENT_TIME + 120.0
        assert window.any()
        late[s] = float(np.abs(ts["omega_t"][window] - 1.0).max())
    verdict(9, max(late.values()) < 0.01,
            "|w_t - 1| after 120 s: " + ", ".join(f"{s} {v:.4f}" for s, v in late.items()))


# ---- 10 ---------------------------------------------------------------------------

def _convergence_ratios(scheme):
    """Three-point Richardson ratio and the ratio against a dt/8 reference.

    The default scenario: default configuration with half of the Bus 7 load
    lost, integrated through run_scenario as any user run would be.
    """
    model = assemble_system(controller=scheme)
    x0 = find_equilibrium(model).state.x

    def end_state(dt):
        sc = Scenario(duration=1.1, dt=dt, events=(LoadEvent(7, 0.1, 0.5),), sample_period=1.1, signals=("f",))
        return run_scenario(model, sc, x0=x0).final_state.x

    h = 0.001
    xs = [end_state(h / 2 ** k) for k in range(4)]
    diff = [float(np.abs(xs[k] - xs[k + 1]).max()) for k in range(2)]
    err = [float(np.abs(xs[k] - xs[3]).max()) for k in range(2)]
    return diff[0] / diff[1], err[0] / err[1]


def _linear_agreement():
    worst = 0.0
    rng = np.random.default_rng(7)
    for scheme in SCHEMES:
        model = assemble_system(controller=scheme)
        x_eq = find_equilibrium(model).state.x
        lin = numerical_jacobian(model, x_eq)
        dx0 = 1e-4 * rng.choice([-1.0, 1.0], size=x_eq.size)
        ts = np.arange(0, 5001) * 0.001
        linear = linear_response(lin, dx0, ts[::100])
        integ = TrapezoidalIntegrator(model, 0.001)
        x = x_eq + dx0
        fx = model.rhs(x)
        for k in range(1, ts.size):
            x, fx = integ.step(x, fx)
            if k % 100 == 0:
                worst = max(worst, float(np.abs((x - x_eq) - linear[k // 100]).max()))
    return worst


def _inversion_round_trip():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10000):
        mag = rng.uniform(0.2, 1.5)
        ang = rng.uniform(-math.pi, math.pi)
        v = (mag * math.cos(ang), mag * math.sin(ang))
        p, q = rng.uniform(-1.5, 1.5, size=2)
        p2, q2 = dq_power(v, current_inversion(*v, p, q))
        worst = max(worst, abs(p2 - p), abs(q2 - q))
    return worst


def test_c10_numerics(mode_reports, verdict):
    ratio, ratio_ref = _convergence_ratios("VSG")
    cpc_ratio, _ = _convergence_ratios("CPC")
    lin = _linear_agreement()
    resid = max(r.max_residual for r in mode_reports.values())
    inv = _inversion_round_trip()
    ok = 3.2 <= ratio <= 4.8 and lin < 1e-3 and resid < 1e-8 and inv < 1e-12
    verdict(10, ok, f"halving ratio {ratio:.2f} (vs dt/8 reference {ratio_ref:.2f}; CPC {cpc_ratio:.2f}), linear/nonlinear {lin:.1e}, eigen residual {resid:.1e}, "
                    f"inversion {inv:.1e}")


# ---- 11 ---------------------------------------------------------------------------

PUBLISHED = {
    "CPC": {"k_Pp": 0.045, "k_Pi": 0.023},
    "VSG": {"k_vsg_p": 100, "k_vsg_d": 33.6, "w_vsg": 0.01},
    "VSG-PID": {"k_vsg_pid_p": 100, "k_vsg_pid_i": 286, "k_vsg_pid_d": 33.6, "w_vsg_pid": 0.01},
    "VSM": {"k_pv": 0.29, "k_iv": 92, "k_ffe": 0, "w_qf": 200, "k_q": 0.1, "w_vf": 200, "l_s": 0.25,
            "r_s": 0.01, "k_w": 20, "T_a": 4, "k_d": 40, "w_d": 5, "f_b": 50, "k_AD": 0.3, "w_AD": 50},
    "VSM-PD": {"k_vsm_pd_p": 100, "k_vsm_pd_d": 500, "w_vsm_pd": 1, "k_w_vsm_pd": 200},
    "VSM-PID": {"k_vsm_pid_p": 3000, "k_vsm_pid_i": 476, "k_vsm_pid_d": 12600, "w_vsm_pid": 1,
                "k_w_vsm_pid": 2000},
    "common": {"R_d": 0.01, "pll_filter_T": 0.001},
}


def test_c11_table_defaults(verdict):
    wrong = []
    for block, values in PUBLISHED.items():
        if TABLE_I[block] != values:
            wrong.append(f"TABLE_I[{block}]")
        schemes = SCHEMES if block == "common" else (
            ("VSM", "VSM-PD", "VSM-PID") if block == "VSM" else (block,))
        for scheme in schemes:
            cfg = VIControllerConfig(scheme)
            wrong += [f"{scheme}.{k}" for k, v in values.items() if cfg[k] != v]
    n = sum(len(v) for v in PUBLISHED.values())
    verdict(11, not wrong, f"{n} published values checked" + (f"; mismatched {wrong}" if wrong else ""))
