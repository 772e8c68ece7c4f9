"""Static network, load events, power flow and two-axis synchronous machines.

Phasors are plain Python/numpy complex numbers in per unit on the system
base, expressed in the synchronously rotating network frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

Phasor = complex


class NetworkError(ValueError):
    pass


class ZeroImpedanceBranch(NetworkError):
    pass


class DuplicateBranchIds(NetworkError):
    pass


class SingularNetwork(NetworkError):
    pass


class NoLoadAtBus(NetworkError):
    pass


class PowerFlowDiverged(NetworkError):
    pass


class LowVoltageRegion(RuntimeError):
    """Terminal voltage left the region where the machine model is valid."""


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0  # total line charging
    id: str | None = None


@dataclass(frozen=True)
class LoadEvent:
    bus: int
    time: float
    retained: float

    def __post_init__(self):
        if not 0.0 <= self.retained <= 1.0:
            raise ValueError(f"retained fraction {self.retained} outside [0, 1]")
        if self.time < 0.0:
            raise ValueError(f"event time {self.time} is negative")


@dataclass(frozen=True)
class NetworkModel:
    """Buses, branches and constant-admittance loads.

    ``loads`` and ``shunts`` map a bus id to a complex admittance.  Loads are
    the part that load events scale; shunts (capacitor banks) are fixed.
    """

    buses: tuple[int, ...]
    branches: tuple[Branch, ...]
    loads: Mapping[int, complex] = field(default_factory=dict)
    shunts: Mapping[int, complex] = field(default_factory=dict)
    base_mva: float = 100.0

    def index(self, bus: int) -> int:
        try:
            return self.buses.index(bus)
        except ValueError:
            raise NetworkError(f"unknown bus {bus}") from None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def admittance(self) -> np.ndarray:
        return build_admittance(self)


def build_admittance(network: NetworkModel) -> np.ndarray:
    n = network.n_bus
    Y = np.zeros((n, n), dtype=complex)
    seen = set()
    for br in network.branches:
        if br.id is not None:
            if br.id in seen:
                raise DuplicateBranchIds(f"branch id {br.id!r} used twice")
            seen.add(br.id)
        z = complex(br.r, br.x)
        if abs(z) < 1e-12:
            raise ZeroImpedanceBranch(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        i, j = network.index(br.from_bus), network.index(br.to_bus)
        y = 1.0 / z
        half_b = 0.5j * br.b
        Y[i, i] += y + half_b
        Y[j, j] += y + half_b
        Y[i, j] -= y
        Y[j, i] -= y
    for bus, y in network.shunts.items():
        Y[network.index(bus), network.index(bus)] += y
    for bus, y in network.loads.items():
        Y[network.index(bus), network.index(bus)] += y
    return Y


def solve_network(Y: np.ndarray, injections: np.ndarray) -> np.ndarray:
    """Bus voltages V with Y @ V = I."""
    Y = np.asarray(Y, dtype=complex)
    current = np.asarray(injections, dtype=complex)
    # a bus without any shunt path leaves Y singular (pure branch Laplacian)
    scale = max(np.abs(Y).max(), 1.0)
    if np.linalg.cond(Y) > 1e12:
        raise SingularNetwork("admittance matrix is singular; islanded bus without shunt path?")
    try:
        V = np.linalg.solve(Y, current)
    except np.linalg.LinAlgError as exc:
        raise SingularNetwork(str(exc)) from exc
    if np.abs(Y @ V - current).max() > 1e-10 * scale * max(1.0, np.abs(V).max()):
        raise SingularNetwork("network solution residual too large")
    return V


def apply_load_event(network: NetworkModel, event: LoadEvent) -> NetworkModel:
    network.index(event.bus)
    y = network.loads.get(event.bus)
    if y is None or y == 0:
        raise NoLoadAtBus(f"no load at bus {event.bus}")
    loads = dict(network.loads)
    loads[event.bus] = y * event.retained
    return replace(network, loads=loads)


def total_load_admittance(network: NetworkModel) -> complex:
    return complex(sum(network.loads.values()))


# --------------------------------------------------------------------------
# power flow

@dataclass(frozen=True)
class GeneratorDispatch:
    name: str
    bus: int
    p: float  # system-base MW/base; ignored at the slack
    v: float
    slack: bool = False


@dataclass
class PowerFlowResult:
    v: np.ndarray  # complex bus voltages, ordered as network.buses
    s_gen: dict[str, complex]  # per generator, system base
    network: NetworkModel  # loads converted to admittances
    iterations: int
    mismatch: float

    def voltage(self, bus: int) -> complex:
        return complex(self.v[self.network.index(bus)])


def _power_injection(Y, v):
    return v * np.conj(Y @ v)


def initialize_power_flow(
    network: NetworkModel,
    dispatch: Sequence[GeneratorDispatch],
    injections: Mapping[int, complex] | None = None,
    load_powers: Mapping[int, complex] | None = None,
    tol: float = 1e-10,
    max_iter: int = 30,
) -> PowerFlowResult:
    """Newton-Raphson power flow in polar coordinates.

    ``injections`` are fixed PQ injections (the converter).  ``load_powers``
    are constant-power loads used only for the solution; afterwards they are
    converted to constant admittances ``conj(S)/|V|^2`` in the returned
    network.  Loads already present in ``network.loads`` stay admittances.
    """
    injections = dict(injections or {})
    load_powers = dict(load_powers or {})
    slack = [g for g in dispatch if g.slack]
    if len(slack) != 1:
        raise PowerFlowDiverged("exactly one slack generator is required")
    n = network.n_bus
    Y = build_admittance(network)

    s_spec = np.zeros(n, dtype=complex)
    for bus, s in injections.items():
        s_spec[network.index(bus)] += s
    for bus, s in load_powers.items():
        s_spec[network.index(bus)] -= s
    vm = np.ones(n)
    va = np.zeros(n)
    pv = []
    for g in dispatch:
        k = network.index(g.bus)
        vm[k] = g.v
        if not g.slack:
            s_spec[k] += g.p
            pv.append(k)
    ref = network.index(slack[0].bus)
    gen_buses = set(pv) | {ref}
    pq = [k for k in range(n) if k not in gen_buses]
    ang_idx = np.array([k for k in range(n) if k != ref], dtype=int)
    mag_idx = np.array(pq, dtype=int)

    mismatch = np.inf
    for it in range(1, max_iter + 1):
        v = vm * np.exp(1j * va)
        ds = _power_injection(Y, v) - s_spec
        f = np.r_[ds.real[ang_idx], ds.imag[mag_idx]]
        mismatch = np.abs(f).max() if f.size else 0.0
        if mismatch < tol:
            break
        # standard polar Jacobian
        ibus = Y @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(v / vm)
        ds_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
        ds_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
        J = np.block([
            [ds_dva.real[np.ix_(ang_idx, ang_idx)], ds_dvm.real[np.ix_(ang_idx, mag_idx)]],
            [ds_dva.imag[np.ix_(mag_idx, ang_idx)], ds_dvm.imag[np.ix_(mag_idx, mag_idx)]],
        ])
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDiverged(f"singular power-flow Jacobian: {exc}") from exc
        va[ang_idx] += dx[: ang_idx.size]
        vm[mag_idx] += dx[ang_idx.size:]
        if not np.all(np.isfinite(vm)) or vm.min() < 0.2:
            raise PowerFlowDiverged(f"voltage collapse at iteration {it}")
    else:
        raise PowerFlowDiverged(f"no convergence after {max_iter} iterations (mismatch {mismatch:.3e})")

    v = vm * np.exp(1j * va)
    s_bus = _power_injection(Y, v)
    loads = dict(network.loads)
    for bus, s in load_powers.items():
        k = network.index(bus)
        loads[bus] = loads.get(bus, 0.0) + np.conj(s) / abs(v[k]) ** 2
    s_gen = {}
    for g in dispatch:
        k = network.index(g.bus)
        s_load_k = load_powers.get(g.bus, 0.0)
        s_gen[g.name] = complex(s_bus[k] + s_load_k - injections.get(g.bus, 0.0))
    return PowerFlowResult(v=v, s_gen=s_gen, network=replace(network, loads=loads),
                           iterations=it, mismatch=float(mismatch))


def branch_losses(network: NetworkModel, v: np.ndarray) -> complex:
    """Total complex power consumed by series branches and line charging."""
    loss = 0j
    for br in network.branches:
        i, j = network.index(br.from_bus), network.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        vi, vj = v[i], v[j]
        i_ij = (vi - vj) * y + vi * 0.5j * br.b
        i_ji = (vj - vi) * y + vj * 0.5j * br.b
        loss += vi * np.conj(i_ij) + vj * np.conj(i_ji)
    return complex(loss)


def shunt_load_power(network: NetworkModel, v: np.ndarray) -> complex:
    s = 0j
    for bus, y in list(network.loads.items()) + list(network.shunts.items()):
        vk = v[network.index(bus)]
        s += vk * np.conj(y * vk)
    return complex(s)


# --------------------------------------------------------------------------
# synchronous machine (two-axis, first-order AVR, first-order droop governor)

@dataclass(frozen=True)
class SyncMachineParams:
    H: float = 6.5
    D: float = 0.0
    xd: float = 1.8
    xq: float = 1.7
    xd_p: float = 0.3
    xq_p: float = 0.55
    ra: float = 0.0025
    Td0_p: float = 8.0
    Tq0_p: float = 0.4
    Ka: float = 200.0
    Ta: float = 0.02
    droop: float = 0.05
    Tg: float = 0.5
    s_n: float = 900.0  # MVA rating; machine quantities are on this base
    w_b: float = 2 * np.pi * 50

    def __post_init__(self):
        if self.H <= 0 or self.Td0_p <= 0 or self.Tq0_p <= 0:
            raise ValueError("H, Td0', Tq0' must be positive")

    @property
    def stator_admittance(self) -> np.ndarray:
        """2x2 matrix mapping (e - v) in machine dq to (i_d, i_q)."""
        Z = np.array([[self.ra, -self.xq_p], [self.xd_p, self.ra]])
        return np.linalg.inv(Z)


SG_STATES = ("delta", "domega", "eq_p", "ed_p", "efd", "pm")


@dataclass
class SyncMachine:
    params: SyncMachineParams
    delta: float
    domega: float
    eq_p: float
    ed_p: float
    efd: float
    pm: float
    v_ref: float
    p_ref: float

    @property
    def state(self) -> np.ndarray:
        return np.array([self.delta, self.domega, self.eq_p, self.ed_p, self.efd, self.pm])


def stator_currents(params: SyncMachineParams, delta, eq_p, ed_p, v_t):
    """Machine-frame (i_d, i_q, v_d, v_q); the network phasor is (d + jq)e^{j(delta - pi/2)}."""
    rot = np.exp(-1j * (delta - np.pi / 2))
    vm = v_t * rot
    vd, vq = vm.real, vm.imag
    A = params.stator_admittance
    ed = ed_p - vd
    eq = eq_p - vq
    i_d = A[0, 0] * ed + A[0, 1] * eq
    i_q = A[1, 0] * ed + A[1, 1] * eq
    return i_d, i_q, vd, vq


def sg_derivatives(m: SyncMachine, v_t: complex, check_voltage: bool = True):
    """State derivatives in SG_STATES order and the injected current.

    The current is on the machine base in the network frame.
    """
    p = m.params
    if check_voltage and abs(v_t) <= 0.2:
        raise LowVoltageRegion(f"terminal voltage {abs(v_t):.3f} pu below model validity (0.2 pu)")
    i_d, i_q, vd, vq = stator_currents(p, m.delta, m.eq_p, m.ed_p, v_t)
    pe = vd * i_d + vq * i_q + p.ra * (i_d * i_d + i_q * i_q)
    d = np.array([
        p.w_b * m.domega,
        (m.pm - pe - p.D * m.domega) / (2 * p.H),
        (m.efd - m.eq_p - (p.xd - p.xd_p) * i_d) / p.Td0_p,
        (-m.ed_p + (p.xq - p.xq_p) * i_q) / p.Tq0_p,
        (p.Ka * (m.v_ref - abs(v_t)) - m.efd) / p.Ta,
        (m.p_ref - m.domega / p.droop - m.pm) / p.Tg,
    ])
    current = (i_d + 1j * i_q) * np.exp(1j * (m.delta - np.pi / 2))
    return d, complex(current)


def init_sync_machine(params: SyncMachineParams, v_t: complex, s_gen: complex) -> SyncMachine:
    """Steady-state machine for terminal voltage and output power (machine base)."""
    i_t = np.conj(s_gen / v_t)
    e_q_axis = v_t + complex(params.ra, params.xq) * i_t
    delta = float(np.angle(e_q_axis))
    rot = np.exp(-1j * (delta - np.pi / 2))
    vm, im = v_t * rot, i_t * rot
    vd, vq, i_d, i_q = vm.real, vm.imag, im.real, im.imag
    ed_p = vd + params.ra * i_d - params.xq_p * i_q
    eq_p = vq + params.ra * i_q + params.xd_p * i_d
    efd = eq_p + (params.xd - params.xd_p) * i_d
    pe = vd * i_d + vq * i_q + params.ra * (i_d ** 2 + i_q ** 2)
    return SyncMachine(params=params, delta=delta, domega=0.0, eq_p=eq_p, ed_p=ed_p,
                       efd=efd, pm=pe, v_ref=abs(v_t) + efd / params.Ka, p_ref=pe)


# --------------------------------------------------------------------------
# default two-area test grid

KUNDUR_LINE = dict(r=0.0001, x=0.001, b=0.00175)  # per km on 100 MVA / 230 kV


def two_area_network() -> tuple[NetworkModel, dict[int, complex]]:
    """Two-area four-machine benchmark grid.

    Returns the network (capacitor banks as shunts, no loads yet) and the
    nominal constant-power loads for the power flow, system base 100 MVA.
    """
    def line(a, b, km, tag):
        return Branch(a, b, KUNDUR_LINE["r"] * km, KUNDUR_LINE["x"] * km, KUNDUR_LINE["b"] * km, id=tag)

    xt = 0.15 / 9.0  # 900 MVA step-up transformers, j0.15 on rating
    branches = (
        Branch(1, 5, 0.0, xt, id="T1"),
        Branch(2, 6, 0.0, xt, id="T2"),
        Branch(3, 11, 0.0, xt, id="T3"),
        Branch(4, 10, 0.0, xt, id="T4"),
        line(5, 6, 25, "L5-6"),
        line(6, 7, 10, "L6-7"),
        line(7, 8, 110, "L7-8a"),
        line(7, 8, 110, "L7-8b"),
        line(8, 9, 110, "L8-9a"),
        line(8, 9, 110, "L8-9b"),
        line(9, 10, 10, "L9-10"),
        line(10, 11, 25, "L10-11"),
    )
    shunts = {7: 2.0j, 9: 3.5j}  # 200 and 350 Mvar capacitor banks at 1 pu
    net = NetworkModel(buses=tuple(range(1, 12)), branches=branches, shunts=shunts)
    load_powers = {7: 9.67 + 1.0j, 9: 17.67 + 1.0j}
    return net, load_powers


AREA_OF_MACHINE = {"SG1": 1, "SG2": 1, "SG3": 2, "SG4": 2}
