"""System assembly, equilibrium search and fixed-step trapezoidal integration.

The grid is quasi-stationary: at every derivative evaluation the bus
voltages are solved from the machine EMFs and converter currents, then all
dynamic states are advanced together.
"""
from __future__ import annotations

import cmath
import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import hydraulic as hyd
from .controllers import VIControllerConfig
from .network import (
    AREA_OF_MACHINE, GeneratorDispatch, LoadEvent, LowVoltageRegion, NetworkModel, SG_STATES,
    SyncMachineParams, apply_load_event, branch_losses, build_admittance, init_sync_machine,
    initialize_power_flow, shunt_load_power, two_area_network,
)
from .vsg import current_inversion, droop_error, from_dq, integrator_gate, pid_power, saturate, to_dq
from .blocks import filtered_derivative
from .vsm import vsm_electrical_model, vsm_pd_supplement, vsm_pid_supplement, vsm_voltage_control


class ConfigInvalid(ValueError):
    pass


class EquilibriumDiverged(RuntimeError):
    pass


class StepDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration of the plant (grid + unit)

def _default_machines() -> dict[str, tuple[int, SyncMachineParams]]:
    a1 = SyncMachineParams(H=6.5)
    a2 = SyncMachineParams(H=6.175)
    return {"SG1": (1, a1), "SG2": (2, a1), "SG3": (3, a2), "SG4": (4, a2)}


@dataclass(frozen=True)
class PlantConfig:
    """Grid, machines and VSHP placement.  Powers in MW unless stated."""

    machines: Mapping[str, tuple[int, SyncMachineParams]] = field(default_factory=_default_machines)
    dispatch_mw: Mapping[str, float] = field(default_factory=lambda: {"SG1": 350.0, "SG2": 650.0, "SG4": 700.0})
    voltage_setpoints: Mapping[str, float] = field(
        default_factory=lambda: {"SG1": 1.03, "SG2": 1.01, "SG3": 1.03, "SG4": 1.01})
    slack: str = "SG3"
    vshp_bus: int = 5
    vshp_mva: float = 400.0
    vshp_p: float = 0.75   # pu on vshp_mva
    vshp_q: float = 0.0
    base_mva: float = 100.0
    load_mw: Mapping[int, complex] = field(default_factory=lambda: {7: 967 + 100j, 9: 1767 + 100j})


# --------------------------------------------------------------------------
# state registry

@dataclass(frozen=True)
class StateRegistry:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate state names")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def module(self, name: str) -> list[str]:
        return [n for n in self.names if n.split(".", 1)[0] == name]


@dataclass
class SystemState:
    x: np.ndarray
    registry: StateRegistry
    t: float = 0.0

    def __getitem__(self, name: str) -> float:
        return float(self.x[self.registry[name]])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.registry.names, map(float, self.x)))


def converter_state_names(scheme: str) -> list[str]:
    names = []
    if scheme in ("CPC", "VSG", "VSG-PID", "VSM-PD", "VSM-PID"):
        names += ["pll.theta", "pll.x_i", "pll.omega"]
    names += ["inj.i_d", "inj.i_q"]
    if scheme in ("CPC", "VSG", "VSG-PID"):
        names += ["ctl.x_q"]
    if scheme == "CPC":
        names += ["cpc.x_i"]
    elif scheme == "VSG":
        names += ["vsg.z_d"]
    elif scheme == "VSG-PID":
        names += ["vsg.z_d", "vsg.x_i", "vsg.p_f"]
    else:
        names += ["vsm.omega", "vsm.theta", "vsm.x_v", "vsm.q_f", "vsm.v0d", "vsm.v0q", "vsm.x_d", "vsm.x_trim"]
        if scheme == "VSM-PD":
            names += ["sup.z_d"]
        elif scheme == "VSM-PID":
            names += ["sup.z_d", "sup.x_i", "sup.p_f"]
    return names


ANGLE_STATES_SUFFIX = (".delta", ".theta")


# --------------------------------------------------------------------------
# assembled model

class SystemModel:
    """Composite model: ``rhs(x)`` solves the network and returns dx/dt."""

    def __init__(self, plant: PlantConfig, controller: VIControllerConfig,
                 hydraulic: hyd.HydraulicParams, network: NetworkModel, machine_names: Sequence[str],
                 setpoints: dict, x0: np.ndarray):
        self.plant = plant
        self.controller = controller
        self.hydraulic = hydraulic
        self.network = network
        self.machine_names = tuple(machine_names)
        self.setpoints = dict(setpoints)
        names = [f"{m.lower()}.{s}" for m in self.machine_names for s in SG_STATES]
        names += [f"hyd.{s}" for s in hyd.HydraulicState.FIELDS]
        names += converter_state_names(controller.scheme)
        self.registry = StateRegistry(tuple(names))
        self.x0 = np.asarray(x0, dtype=float)
        if self.x0.size != len(self.registry):
            raise ConfigInvalid("initial state does not match registry")
        self._prepare()

    # ---- setup -----------------------------------------------------------
    def _prepare(self):
        net = self.network
        N = net.n_bus
        self.n_bus = N
        mp = [self.plant.machines[m][1] for m in self.machine_names]
        self._mp = mp
        self._gen_idx = np.array([net.index(self.plant.machines[m][0]) for m in self.machine_names])
        self._c_gen = np.array([p.s_n / self.plant.base_mva for p in mp])
        A = np.array([p.stator_admittance for p in mp])  # (G, 2, 2)
        self._A = A
        alpha = 0.5 * ((A[:, 0, 0] + A[:, 1, 1]) + 1j * (A[:, 1, 0] - A[:, 0, 1]))
        beta = 0.5 * ((A[:, 0, 0] - A[:, 1, 1]) + 1j * (A[:, 1, 0] + A[:, 0, 1]))
        self._c_alpha = self._c_gen * alpha
        self._c_beta = self._c_gen * beta
        Y = build_admittance(net)
        if np.abs(Y - Y.T).max() != 0.0:
            raise ConfigInvalid("admittance matrix is not symmetric")
        Yp = Y.copy()
        Yp[self._gen_idx, self._gen_idx] += self._c_alpha
        self._M0 = np.block([[Yp.real, -Yp.imag], [Yp.imag, Yp.real]])
        g = self._gen_idx
        self._blk = (g, g + N)
        self._conv_idx = net.index(self.plant.vshp_bus)
        self._c_conv = self.plant.vshp_mva / self.plant.base_mva

        reg = self.registry
        self._i_sg = np.array([[reg[f"{m.lower()}.{s}"] for m in self.machine_names] for s in SG_STATES])
        self._H = np.array([p.H for p in mp])
        self._D = np.array([p.D for p in mp])
        self._xd = np.array([p.xd for p in mp])
        self._xq = np.array([p.xq for p in mp])
        self._xdp = np.array([p.xd_p for p in mp])
        self._xqp = np.array([p.xq_p for p in mp])
        self._ra = np.array([p.ra for p in mp])
        self._Td0 = np.array([p.Td0_p for p in mp])
        self._Tq0 = np.array([p.Tq0_p for p in mp])
        self._Ka = np.array([p.Ka for p in mp])
        self._Ta = np.array([p.Ta for p in mp])
        self._R = np.array([p.droop for p in mp])
        self._Tg = np.array([p.Tg for p in mp])
        self._wb_sg = np.array([p.w_b for p in mp])
        self._v_ref = np.array(self.setpoints["sg_v_ref"])
        self._p_ref = np.array(self.setpoints["sg_p_ref"])
        self._hyd0 = reg["hyd.q_t"]
        self._conv0 = reg["hyd.x_gov"] + 1
        self._angle_mask = np.array([n.endswith(ANGLE_STATES_SUFFIX) for n in reg.names])
        self._cfg = dict(self.controller.params)
        self._w_b = self.controller.w_b
        self._k_w = self.controller.k_w if self.controller.is_vsm else 0.0

    def with_network(self, network: NetworkModel) -> "SystemModel":
        new = object.__new__(SystemModel)
        new.__dict__.update(self.__dict__)
        new.network = network
        new._prepare()
        return new

    # ---- network ---------------------------------------------------------
    def _machine_emf(self, x):
        i = self._i_sg
        delta = x[i[0]]
        rot = np.exp(1j * (delta - np.pi / 2))
        return delta, rot, (x[i[3]] + 1j * x[i[2]]) * rot

    def converter_current(self, x) -> complex:
        """Injected converter current, network frame, VSHP base."""
        reg = self.registry
        theta = x[reg["vsm.theta"]] if self.controller.is_vsm else x[reg["pll.theta"]]
        return from_dq(x[reg["inj.i_d"]], x[reg["inj.i_q"]], theta)

    def bus_voltages(self, x) -> np.ndarray:
        N = self.n_bus
        _, rot, E = self._machine_emf(x)
        d = self._c_beta * rot * rot
        b = np.zeros(N, dtype=complex)
        b[self._gen_idx] += self._c_alpha * E + d * np.conj(E)
        b[self._conv_idx] += self._c_conv * self.converter_current(x)
        M = self._M0.copy()
        g, gN = self._blk
        M[g, g] += d.real
        M[g, gN] += d.imag
        M[gN, g] += d.imag
        M[gN, gN] -= d.real
        sol = np.linalg.solve(M, np.concatenate((b.real, b.imag)))
        return sol[:N] + 1j * sol[N:]

    def power_balance(self, x) -> complex:
        """Terminal generation minus load and branch losses, system base.

        Generation is computed from the machine and converter currents, so a
        nonzero result means the network solution and the device models disagree.
        """
        V = self.bus_voltages(x)
        vt = V[self._gen_idx]
        i = self._i_sg
        rot = np.exp(1j * (x[i[0]] - np.pi / 2))
        vm = vt / rot
        A = self._A
        e_d, e_q = x[i[3]] - vm.real, x[i[2]] - vm.imag
        i_m = (A[:, 0, 0] * e_d + A[:, 0, 1] * e_q) + 1j * (A[:, 1, 0] * e_d + A[:, 1, 1] * e_q)
        gen = np.sum(vt * np.conj(self._c_gen * i_m * rot))
        v_c = V[self._conv_idx]
        gen += v_c * np.conj(self._c_conv * self.converter_current(x))
        return complex(gen - shunt_load_power(self.network, V) - branch_losses(self.network, V))

    # ---- derivatives -----------------------------------------------------
    def rhs(self, x: np.ndarray) -> np.ndarray:
        return self._evaluate(x, want_signals=False)

    def signals(self, x: np.ndarray) -> dict[str, float]:
        return self._evaluate(x, want_signals=True)

    def _evaluate(self, x, want_signals):
        dx = np.empty_like(x)
        V = self.bus_voltages(x)
        vt = V[self._gen_idx]
        if np.abs(vt).min() <= 0.2:
            raise LowVoltageRegion(f"generator terminal voltage {np.abs(vt).min():.3f} pu below 0.2 pu")

        # synchronous machines, machine base
        i = self._i_sg
        delta, domega, eq, ed, efd, pm = (x[k] for k in i)
        vm = vt * np.exp(-1j * (delta - np.pi / 2))
        vd, vq = vm.real, vm.imag
        A = self._A
        e_d, e_q = ed - vd, eq - vq
        i_d = A[:, 0, 0] * e_d + A[:, 0, 1] * e_q
        i_q = A[:, 1, 0] * e_d + A[:, 1, 1] * e_q
        pe = vd * i_d + vq * i_q + self._ra * (i_d * i_d + i_q * i_q)
        dx[i[0]] = self._wb_sg * domega
        dx[i[1]] = (pm - pe - self._D * domega) / (2 * self._H)
        dx[i[2]] = (efd - eq - (self._xd - self._xdp) * i_d) / self._Td0
        dx[i[3]] = (-ed + (self._xq - self._xqp) * i_q) / self._Tq0
        dx[i[4]] = (self._Ka * (self._v_ref - np.abs(vt)) - efd) / self._Ta
        dx[i[5]] = (self._p_ref - domega / self._R - pm) / self._Tg

        # converter
        v_c = complex(V[self._conv_idx])
        conv = self._converter(x, dx, v_c, want_signals)
        p_g = conv["p_g"]

        # hydraulics, driven by the converter's electrical power
        h = self._hyd0
        hp = self.hydraulic
        q_t, q_p, h_st, g, w_t, x_gov = (float(v) for v in x[h:h + 6])
        s = hyd.HydraulicState(q_t, q_p, h_st, g, w_t, x_gov)
        dx[h:h + 6] = hyd.hydraulic_derivatives(s, p_g, hp)

        if not want_signals:
            return dx
        h_coi = self._H * self._c_gen
        out = {
            "f": float(1.0 + np.dot(h_coi, domega) / h_coi.sum()),
            "p_g": p_g,
            "q_g": conv["q_g"],
            "v_c": abs(v_c),
            "omega_t": w_t,
            "p_m": hyd.turbine_power(q_p, g),
            "g": g,
            "q_p": q_p,
            "q_t": q_t,
            "h_st": h_st,
            "i_d": conv["i_d"],
            "i_q": conv["i_q"],
            "saturated": float(conv["saturated"]),
        }
        for k, m in enumerate(self.machine_names):
            out[f"omega_{m.lower()}"] = float(1.0 + domega[k])
            out[f"p_{m.lower()}"] = float(pe[k] * self._c_gen[k])
        for k in ("omega_g", "omega_vsm", "theta_vsm", "v_e_hat", "p_r_star", "eps", "p_f"):
            if k in conv:
                out[k] = conv[k]
        out["total_load_admittance"] = abs(sum(self.network.loads.values()))
        return out

    def _converter(self, x, dx, v_c, want_signals):
        reg = self.registry
        cfg = self._cfg
        sch = self.controller.scheme
        sp = self.setpoints
        p_ref = sp["p_ref"]
        out = {}
        omega_g = None
        if sch != "VSM":
            th, xi, wf = x[reg["pll.theta"]], x[reg["pll.x_i"]], x[reg["pll.omega"]]
            mag = abs(v_c)
            if mag > 0.1:
                err = (v_c * cmath.exp(-1j * th)).imag / mag
                dw = cfg["pll_kp"] * err + xi
                dx[reg["pll.theta"]] = self._w_b * dw
                dx[reg["pll.x_i"]] = cfg["pll_ki"] * err
                dx[reg["pll.omega"]] = (1.0 + dw - wf) / cfg["pll_filter_T"]
            else:
                dx[reg["pll.theta"]] = dx[reg["pll.x_i"]] = dx[reg["pll.omega"]] = 0.0
            omega_g = wf
            out["omega_g"] = wf

        i_d, i_q = x[reg["inj.i_d"]], x[reg["inj.i_q"]]
        if self.controller.is_vsm:
            theta = x[reg["vsm.theta"]]
        else:
            theta = th
        vd, vq = to_dq(v_c, theta)
        p_g = vd * i_d + vq * i_q
        q_g = vd * i_q - vq * i_d
        integrators = []

        if not self.controller.is_vsm:
            d_omega = cfg["omega_ref"] - omega_g
            i_q_ref = cfg["k_pq"] * (sp["q_ref"] - q_g) + x[reg["ctl.x_q"]]
            integrators.append((reg["ctl.x_q"], cfg["k_iq"] * (sp["q_ref"] - q_g)))
            if sch == "CPC":
                err = p_ref - p_g
                i_d_ref = cfg["k_Pp"] * err + x[reg["cpc.x_i"]]
                integrators.append((reg["cpc.x_i"], cfg["k_Pi"] * err))
            elif sch == "VSG":
                y_d, dz = filtered_derivative(d_omega, x[reg["vsg.z_d"]], cfg["k_vsg_d"], cfg["w_vsg"])
                dx[reg["vsg.z_d"]] = dz
                p_set = cfg["k_vsg_p"] * d_omega + y_d + p_ref
                i_d_ref, _ = current_inversion(vd, vq, p_set, q_g)
            else:  # VSG-PID
                p_f = x[reg["vsg.p_f"]]
                eps = droop_error(omega_g, p_f, cfg)
                p_pid, dz = pid_power(eps, x[reg["vsg.z_d"]], x[reg["vsg.x_i"]],
                                      cfg["k_vsg_pid_p"], cfg["k_vsg_pid_d"], cfg["w_vsg_pid"])
                dx[reg["vsg.z_d"]] = dz
                dx[reg["vsg.p_f"]] = (p_g - p_ref - p_f) / cfg["T_pf"]
                integrators.append((reg["vsg.x_i"], cfg["k_vsg_pid_i"] * eps))
                i_d_ref, _ = current_inversion(vd, vq, p_pid + p_ref, q_g)
                out["eps"], out["p_f"] = eps, p_f
            limit = cfg["i_max"]
        else:
            om, xd = x[reg["vsm.omega"]], x[reg["vsm.x_d"]]
            v_e, dxv, dqf = vsm_voltage_control(v_c, q_g, sp["v_ref"], sp["q_ref"],
                                                x[reg["vsm.x_v"]], x[reg["vsm.q_f"]], cfg)
            integrators.append((reg["vsm.x_v"], dxv))
            dx[reg["vsm.q_f"]] = dqf
            v0 = complex(x[reg["vsm.v0d"]], x[reg["vsm.v0q"]])
            i_s, _, _ = vsm_electrical_model(v_e, 0.0, v0, om, v_c, cfg)
            dv0 = cfg["w_vf"] * (v_c * cmath.exp(-1j * theta) - v0)
            dx[reg["vsm.v0d"]] = dv0.real
            dx[reg["vsm.v0q"]] = dv0.imag
            i_d_ref, i_q_ref = i_s.real, -i_s.imag
            p_sup = 0.0
            if sch == "VSM-PD":
                p_sup, dz = vsm_pd_supplement(omega_g, x[reg["sup.z_d"]], cfg)
                dx[reg["sup.z_d"]] = dz
            elif sch == "VSM-PID":
                p_f = x[reg["sup.p_f"]]
                p_sup, dz, dxi = vsm_pid_supplement(omega_g, p_f, x[reg["sup.z_d"]],
                                                    x[reg["sup.x_i"]], cfg)
                dx[reg["sup.z_d"]] = dz
                dx[reg["sup.p_f"]] = (p_g - p_ref - p_f) / cfg["T_pf"]
                integrators.append((reg["sup.x_i"], dxi))
                out["eps"] = droop_error(omega_g, p_f, cfg)
                out["p_f"] = p_f
            x_trim = x[reg["vsm.x_trim"]]
            p_r = p_ref + p_sup + x_trim + self._k_w * (cfg["omega_ref"] - om)
            dx[reg["vsm.omega"]] = (p_r - p_g - cfg["k_d"] * (om - xd)) / cfg["T_a"]
            dx[reg["vsm.theta"]] = self._w_b * (om - 1.0)
            dx[reg["vsm.x_d"]] = cfg["w_d"] * (om - xd)
            integrators.append((reg["vsm.x_trim"], (p_ref + p_sup - p_g) / cfg["T_trim"]))
            limit = cfg["vsm_current_limit"]
            out.update(omega_vsm=om, theta_vsm=theta, v_e_hat=v_e, p_r_star=p_r)

        rd, rq, sat = saturate(i_d_ref, i_q_ref, limit)
        gate = integrator_gate(math.hypot(i_d_ref, i_q_ref), limit)
        dx[reg["inj.i_d"]] = (rd - i_d) / cfg["T_lag"]
        dx[reg["inj.i_q"]] = (rq - i_q) / cfg["T_lag"]
        for k, rate in integrators:
            dx[k] = gate * rate
        out.update(p_g=p_g, q_g=q_g, i_d=i_d, i_q=i_q, saturated=sat)
        return out

    # ---- helpers ---------------------------------------------------------
    def state(self, x=None, t=0.0) -> SystemState:
        return SystemState(np.array(self.x0 if x is None else x, dtype=float), self.registry, t)

    @property
    def angle_mask(self) -> np.ndarray:
        return self._angle_mask

    def jacobian(self, x: np.ndarray, central: bool = False) -> np.ndarray:
        n = x.size
        J = np.empty((n, n))
        f0 = None if central else self.rhs(x)
        for k in range(n):
            # small enough not to step across the guide-vane floor of the turbine law
            h = 1e-8 * max(1.0, abs(x[k]))
            xp = x.copy()
            xp[k] += h
            if central:
                xm = x.copy()
                xm[k] -= h
                J[:, k] = (self.rhs(xp) - self.rhs(xm)) / (2 * h)
            else:
                J[:, k] = (self.rhs(xp) - f0) / h
        return J

    def saturation_active(self, x: np.ndarray) -> bool:
        return bool(self.signals(x)["saturated"])


def assemble_system(plant: PlantConfig | None = None, controller: VIControllerConfig | str = "VSG",
                    hydraulic: hyd.HydraulicParams | None = None,
                    events: Iterable[LoadEvent] = ()) -> SystemModel:
    """Build the composite model initialised from a power flow."""
    plant = plant or PlantConfig()
    if isinstance(controller, str):
        controller = VIControllerConfig(controller)
    hydraulic = hydraulic or hyd.HydraulicParams()
    net, _ = two_area_network()
    errors = []
    buses = set(net.buses)
    for name, (bus, _) in plant.machines.items():
        if bus not in buses:
            errors.append(f"machines.{name}.bus: unknown bus {bus}")
    if plant.vshp_bus not in buses:
        errors.append(f"vshp_bus: unknown bus {plant.vshp_bus}")
    for bus in plant.load_mw:
        if bus not in buses:
            errors.append(f"loads.{bus}: unknown bus")
    for ev in events:
        if ev.bus not in buses:
            errors.append(f"events: unknown bus {ev.bus}")
        elif ev.bus not in plant.load_mw:
            errors.append(f"events: bus {ev.bus} carries no load")
    if plant.slack not in plant.machines:
        errors.append(f"slack: unknown machine {plant.slack}")
    if not 0.0 < plant.vshp_p < 1.0:
        errors.append("vshp_p: must lie in (0, 1)")
    if errors:
        raise ConfigInvalid("; ".join(errors))

    base = plant.base_mva
    names = sorted(plant.machines)
    dispatch = [
        GeneratorDispatch(m, plant.machines[m][0], plant.dispatch_mw.get(m, 0.0) / base,
                          plant.voltage_setpoints.get(m, 1.0), slack=(m == plant.slack))
        for m in names
    ]
    c_conv = plant.vshp_mva / base
    s_conv = complex(plant.vshp_p, plant.vshp_q)
    pf = initialize_power_flow(net, dispatch, injections={plant.vshp_bus: s_conv * c_conv},
                               load_powers={b: s / base for b, s in plant.load_mw.items()})

    xs = []
    v_ref, p_ref = [], []
    for m in names:
        bus, params = plant.machines[m]
        c = params.s_n / base
        sm = init_sync_machine(params, pf.voltage(bus), pf.s_gen[m] / c)
        xs.append(sm.state)
        v_ref.append(sm.v_ref)
        p_ref.append(sm.p_ref)
    sg_block = np.array(xs).ravel()  # machine-major, matches registry order

    h0 = hyd.hydraulic_steady_state(plant.vshp_p, hydraulic)
    v5 = pf.voltage(plant.vshp_bus)
    i_conv = (s_conv / v5).conjugate()
    setpoints = {"sg_v_ref": v_ref, "sg_p_ref": p_ref, "p_ref": plant.vshp_p, "q_ref": plant.vshp_q,
                 "v_ref": abs(v5)}
    conv = _initial_converter_states(controller, v5, i_conv, s_conv)
    x0 = np.concatenate([sg_block, h0.as_array(), conv])
    return SystemModel(plant, controller, hydraulic, pf.network, names, setpoints, x0)


def _initial_converter_states(cfg: VIControllerConfig, v: complex, i: complex, s: complex) -> np.ndarray:
    names = converter_state_names(cfg.scheme)
    val = {}
    if cfg.uses_pll:
        val.update({"pll.theta": cmath.phase(v), "pll.x_i": 0.0, "pll.omega": 1.0})
    if cfg.is_vsm:
        z = complex(cfg["r_s"], cfg["l_s"])
        e = v + z * i
        theta = cmath.phase(e)
        v0 = v * cmath.exp(-1j * theta)
        val.update({
            "vsm.omega": 1.0, "vsm.theta": theta, "vsm.x_v": abs(e) - cfg["k_ffe"] * abs(v),
            "vsm.q_f": s.imag, "vsm.v0d": v0.real, "vsm.v0q": v0.imag, "vsm.x_d": 1.0, "vsm.x_trim": 0.0,
            "sup.z_d": 0.0, "sup.x_i": 0.0, "sup.p_f": 0.0,
        })
    else:
        theta = val["pll.theta"]
    i_d, i_q = to_dq(i, theta)
    val.update({"inj.i_d": i_d, "inj.i_q": i_q, "ctl.x_q": i_q, "cpc.x_i": i_d,
                "vsg.z_d": 0.0, "vsg.x_i": 0.0, "vsg.p_f": 0.0})
    return np.array([val[n] for n in names])


# --------------------------------------------------------------------------
# equilibrium

@dataclass
class EquilibriumResult:
    state: SystemState
    residual: float
    iterations: int


def find_equilibrium(model: SystemModel, x0: np.ndarray | None = None, tol: float = 1e-9,
                     max_iter: int = 30) -> EquilibriumResult:
    """Newton on f(x) = 0 with a finite-difference Jacobian.

    A uniform rotation of all angles leaves f unchanged, so the Jacobian is
    singular along that direction.  The first machine angle is held fixed and
    the update for the remaining states is the least-squares solution.
    """
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    f = model.rhs(x)
    res = np.abs(f).max()
    it = 0
    target = min(tol, 1e-12)
    keep = np.ones(x.size, dtype=bool)
    if np.any(model.angle_mask):
        keep[int(np.argmax(model.angle_mask))] = False
    while res > target and it < max_iter:
        it += 1
        J = model.jacobian(x)
        dx = np.zeros_like(x)
        dx[keep] = np.linalg.lstsq(J[:, keep], -f, rcond=None)[0]
        x = x + dx
        f_new = model.rhs(x)
        res_new = np.abs(f_new).max()
        if res_new >= res and res_new <= tol:
            x, f = x - dx, f  # no further progress possible
            break
        f, res = f_new, res_new
    if it == 0:
        it = 1
    if not np.isfinite(res) or res > tol:
        worst = int(np.nanargmax(np.abs(f)))
        raise EquilibriumDiverged(
            f"equilibrium not found: worst residual {model.registry.names[worst]} = {f[worst]:.3e}")
    return EquilibriumResult(model.state(x), float(res), it)


# --------------------------------------------------------------------------
# integration

class TrapezoidalIntegrator:
    """Implicit trapezoidal rule with a frozen-Jacobian Newton iteration.

    The trapezoidal rule does not damp stiff modes, so an algebraic jump
    (a load event) leaves the fast converter loop ringing at the step rate.
    A step flagged ``damped`` is taken as two backward-Euler half steps
    instead (critical damping adjustment); used once per event it does not
    change the global order.

    A step whose Newton iteration fails is retried as two half steps, down
    to ``max_halvings`` levels, and finally as a backward-Euler step.  The
    outer step size is unchanged.
    """

    def __init__(self, model: SystemModel, dt: float, tol: float = 1e-10, max_iter: int = 12,
                 max_halvings: int = 6):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.model = model
        self.dt = dt
        self.tol = tol
        self.max_iter = max_iter
        self.max_halvings = max_halvings
        self._lu: dict[tuple, tuple] = {}
        self.evaluations = 0
        self.halvings = 0
        self.fallbacks = 0
        self.damped_steps = 0

    def set_model(self, model: SystemModel):
        self.model = model
        self._lu = {}

    def _factor(self, x, dt, theta):
        self._lu[(dt, theta)] = lu = lu_factor(np.eye(x.size) - theta * dt * self.model.jacobian(x))
        return lu

    def _newton(self, x, fx, dt, theta=0.5):
        """Solve y = x + dt*((1-theta) f(x) + theta f(y)); theta=1 is backward Euler."""
        key = (dt, theta)
        refreshes = 0
        if key not in self._lu:
            self._factor(x, dt, theta)
            refreshes = 1
        lu = self._lu[key]
        y = x + dt * fx
        it = 0
        prev = np.inf
        while True:
            fy = self.model.rhs(y)
            self.evaluations += 1
            g = y - x - dt * ((1.0 - theta) * fx + theta * fy)
            res = np.abs(g).max()
            if res <= self.tol:
                return _clamp(self.model, y), fy
            if not np.isfinite(res):
                return None
            it += 1
            if it > self.max_iter:
                return None
            if it >= 3 and res > 0.25 * prev and refreshes < 3:
                lu = self._factor(y, dt, theta)
                refreshes += 1
            prev = res
            y = y + lu_solve(lu, -g, check_finite=False)

    def _attempt(self, x, fx, dt, theta=0.5):
        try:
            return self._newton(x, fx, dt, theta)
        except (LowVoltageRegion, ArithmeticError, ValueError):
            return None

    def step(self, x: np.ndarray, fx: np.ndarray, dt: float | None = None, damped: bool = False):
        """Returns (x_next, f(x_next))."""
        dt = self.dt if dt is None else dt
        if not damped:
            return self._step(x, fx, dt)
        self.damped_steps += 1
        x, fx = self._step(x, fx, 0.5 * dt, theta=1.0)
        return self._step(x, fx, 0.5 * dt, theta=1.0)

    def _step(self, x, fx, dt, _depth: int = 0, theta: float = 0.5):
        out = self._attempt(x, fx, dt, theta)
        if out is not None:
            return out
        if _depth >= self.max_halvings:
            # stiff ringing: an L-stable substep gets past it
            out = self._attempt(x, fx, dt, theta=1.0)
            if out is None:
                self._newton(x, fx, dt)  # re-raise the underlying error if there is one
                raise StepDiverged(f"implicit step did not converge after {self.max_halvings} halvings; "
                                   f"try a smaller dt than {self.dt}")
            self.fallbacks += 1
            return out
        self.halvings += 1
        half = 0.5 * dt
        xm, fm = self._step(x, fx, half, _depth + 1, theta)
        return self._step(xm, fm, half, _depth + 1, theta)


def _clamp(model: SystemModel, y: np.ndarray) -> np.ndarray:
    if "hyd.g" not in model.registry:
        return y
    k = model.registry["hyd.g"]
    if y[k] > 1.0 or y[k] < 0.0:
        y = y.copy()
        y[k] = min(max(y[k], 0.0), 1.0)
    return y


def integrate_step(model: SystemModel, x: SystemState, dt: float, tol: float = 1e-10) -> SystemState:
    integ = TrapezoidalIntegrator(model, dt, tol=tol)
    y, _ = integ.step(x.x, model.rhs(x.x))
    return SystemState(y, x.registry, x.t + dt)


# --------------------------------------------------------------------------
# scenarios

DEFAULT_SIGNALS = ("f", "p_g", "q_g", "omega_t", "p_m", "g", "q_p", "q_t", "h_st", "v_c")


@dataclass(frozen=True)
class Scenario:
    duration: float = 30.0
    dt: float = 0.001
    events: tuple[LoadEvent, ...] = ()
    sample_period: float = 0.01
    signals: tuple[str, ...] = DEFAULT_SIGNALS

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigInvalid("dt must be positive")
        if self.sample_period < self.dt - 1e-15:
            raise ConfigInvalid("sample_period must be >= dt")
        for ev in self.events:
            if not 0.0 <= ev.time <= self.duration:
                raise ConfigInvalid(f"event at t={ev.time} outside [0, {self.duration}]")


@dataclass
class TimeSeries:
    t: np.ndarray
    columns: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    final_state: SystemState | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        if name == "t":
            return self.t
        return self.columns[name]

    def to_csv(self, path: str | os.PathLike):
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                for k, v in self.metadata.items():
                    fh.write(f"# {k}: {v}\n")
                w = csv.writer(fh)
                names = list(self.columns)
                w.writerow(["t"] + names)
                for row in zip(self.t, *(self.columns[n] for n in names)):
                    w.writerow([repr(float(v)) for v in row])
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        meta = {}
        rows = []
        with open(path, newline="") as fh:
            lines = []
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition(": ")
                    meta[k] = v
                else:
                    lines.append(line)
        reader = csv.reader(lines)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
        cols = {n: rows[:, i] for i, n in enumerate(header)}
        return cls(cols.pop("t"), cols, meta)


def scenario_hash(model: SystemModel, scenario: Scenario) -> str:
    blob = json.dumps({
        "scenario": asdict(scenario),
        "controller": {"scheme": model.controller.scheme, "params": model.controller.params},
        "hydraulic": asdict(model.hydraulic),
        "vshp": [model.plant.vshp_bus, model.plant.vshp_mva, model.plant.vshp_p],
    }, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_scenario(model: SystemModel, scenario: Scenario, x0: np.ndarray | None = None,
                 tol: float = 1e-10) -> TimeSeries:
    """Integrate from the model's equilibrium through the scenario's events."""
    if x0 is None:
        x0 = find_equilibrium(model).state.x
    x = np.array(x0, dtype=float)
    events = sorted(scenario.events, key=lambda e: e.time)
    dt = scenario.dt
    n_steps = int(round(scenario.duration / dt))
    sample_every = max(1, int(round(scenario.sample_period / dt)))
    integ = TrapezoidalIntegrator(model, dt, tol=tol)

    times, rows = [], []

    def record(t, model, x):
        sig = model.signals(x)
        missing = [s for s in scenario.signals if s not in sig]
        if missing:
            raise ConfigInvalid(f"unknown signals {missing}")
        times.append(t)
        rows.append([sig[s] for s in scenario.signals])

    ev_i = 0
    t = 0.0
    fx = None
    damped = False
    for k in range(n_steps + 1):
        t = k * dt
        changed = False
        while ev_i < len(events) and events[ev_i].time <= t + 1e-9 * dt:
            model = model.with_network(apply_load_event(model.network, events[ev_i]))
            ev_i += 1
            changed = True
        if changed or fx is None:
            integ.set_model(model)
            fx = model.rhs(x)
            damped = changed
        if k % sample_every == 0:
            record(t, model, x)
        if k == n_steps:
            break
        try:
            x, fx = integ.step(x, fx, damped=damped)
            damped = False
        except StepDiverged as exc:
            raise StepDiverged(f"t={t:.4f} s: {exc}") from exc
        except LowVoltageRegion as exc:
            raise LowVoltageRegion(f"t={t:.4f} s: {exc}") from exc

    data = np.array(rows)
    columns = {s: data[:, i] for i, s in enumerate(scenario.signals)}
    meta = {"scenario_hash": scenario_hash(model, scenario), "controller": model.controller.scheme,
            "dt": dt}
    return TimeSeries(np.array(times), columns, meta, SystemState(x, model.registry, t))
