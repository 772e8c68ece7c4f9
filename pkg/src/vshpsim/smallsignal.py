"""Linearisation at an equilibrium, eigen-analysis and mode classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg


class NonEquilibriumPoint(ValueError):
    pass


class EigenFailed(RuntimeError):
    pass


class ModeMatchAmbiguous(RuntimeError):
    pass


MODE_LABELS = ("interarea", "local-area1", "local-area2", "vshp-sg1")
VSHP_PREFIXES = ("pll", "inj", "ctl", "cpc", "vsg", "vsm", "sup")
AREA1, AREA2 = ("sg1", "sg2"), ("sg3", "sg4")


@dataclass
class LinearModel:
    A: np.ndarray
    labels: tuple[str, ...]
    x_eq: np.ndarray
    scheme: str = ""

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (len(self.labels), len(self.labels)):
            raise ValueError("state matrix and labels disagree in size")


def _rhs_of(model) -> Callable[[np.ndarray], np.ndarray]:
    return model.rhs if hasattr(model, "rhs") else model


def numerical_jacobian(model, x_eq, tol: float = 1e-9, labels: Sequence[str] | None = None,
                       check_equilibrium: bool = True) -> LinearModel:
    """Central-difference state matrix; the network is re-solved in every evaluation.

    ``model`` is a SystemModel or any callable f(x).  ``x_eq`` may be a
    SystemState or an array.
    """
    f = _rhs_of(model)
    x = np.array(getattr(x_eq, "x", x_eq), dtype=float).ravel()
    f0 = np.asarray(f(x), dtype=float)
    if check_equilibrium:
        worst = np.abs(f0).max()
        if not worst < tol:
            k = int(np.argmax(np.abs(f0)))
            name = _labels(model, x.size, labels)[k]
            raise NonEquilibriumPoint(f"residual {worst:.3e} at {name} exceeds {tol:.1e}")
        if hasattr(model, "saturation_active") and model.saturation_active(x):
            raise NonEquilibriumPoint("current limiter active at the linearisation point")
    n = x.size
    A = np.empty((n, n))
    for k in range(n):
        h = max(1e-6, 1e-6 * abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        A[:, k] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    scheme = getattr(getattr(model, "controller", None), "scheme", "")
    return LinearModel(A, tuple(_labels(model, n, labels)), x, scheme)


def _labels(model, n, labels):
    if labels is not None:
        return list(labels)
    reg = getattr(model, "registry", None)
    if reg is not None:
        return list(reg.names)
    return [f"x{k}" for k in range(n)]


@dataclass
class EigenDecomposition:
    values: np.ndarray
    right: np.ndarray   # columns
    left: np.ndarray    # rows, scaled so that left @ right = I

    def residuals(self, A: np.ndarray) -> np.ndarray:
        r = self.right
        return np.linalg.norm(A @ r - r * self.values, axis=0) / np.linalg.norm(r, axis=0)


def eigen_decompose(A: np.ndarray, residual_tol: float = 1e-8) -> EigenDecomposition:
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise EigenFailed("state matrix contains non-finite entries")
    try:
        lam, vl, vr = scipy.linalg.eig(A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenFailed(str(exc)) from exc
    vr = vr / np.linalg.norm(vr, axis=0)
    W = vl.conj().T
    scale = np.einsum("ij,ji->i", W, vr)
    if np.any(np.abs(scale) < 1e-14):
        raise EigenFailed("defective eigenvalue: left and right eigenvectors orthogonal")
    W = W / scale[:, None]
    dec = EigenDecomposition(lam, vr, W)
    res = dec.residuals(A)
    if not np.all(res < residual_tol * max(1.0, np.abs(A).max() * 1e-4)):
        raise EigenFailed(f"eigen residual {res.max():.2e} exceeds tolerance")
    return dec


def check_conjugate_pairs(values: np.ndarray, tol: float = 1e-9) -> None:
    for lam in values[np.abs(values.imag) > tol]:
        if np.abs(values - np.conj(lam)).min() > tol * max(1.0, abs(lam)):
            raise EigenFailed(f"eigenvalue {lam} has no conjugate partner")


@dataclass
class Mode:
    eigenvalue: complex
    participation: dict[str, float]
    classification: str
    shape: dict[str, complex] = field(default_factory=dict, repr=False)

    @property
    def sigma(self) -> float:
        return float(self.eigenvalue.real)

    @property
    def omega(self) -> float:
        return float(self.eigenvalue.imag)

    @property
    def f_hz(self) -> float:
        return abs(self.omega) / (2 * np.pi)

    @property
    def zeta(self) -> float:
        return damping_ratio(self.eigenvalue)

    def group(self, name: str) -> float:
        return group_participation(self.participation).get(name, 0.0)

    def as_dict(self, min_participation: float = 1e-4) -> dict:
        return {
            "sigma": self.sigma, "omega": self.omega, "f_hz": self.f_hz, "zeta": self.zeta,
            "classification": self.classification,
            "participation": {k: v for k, v in sorted(self.participation.items(), key=lambda kv: -kv[1])
                              if v >= min_participation},
        }


def damping_ratio(lam: complex) -> float:
    mag = abs(lam)
    if mag == 0.0:
        return 1.0
    return float(-lam.real / mag)


def participation_factors(right_col: np.ndarray, left_row: np.ndarray) -> np.ndarray:
    p = np.abs(left_row * right_col)
    s = p.sum()
    return p / s if s > 0 else p


def group_participation(part: Mapping[str, float]) -> dict[str, float]:
    """Lump per-state participation into SG electromechanical groups and the VSHP group."""
    out = {"sg1": 0.0, "sg2": 0.0, "sg3": 0.0, "sg4": 0.0, "vshp": 0.0, "other": 0.0}
    for name, v in part.items():
        mod, _, st = name.partition(".")
        if mod in out and st in ("delta", "domega"):
            out[mod] += v
        elif mod in VSHP_PREFIXES or name == "hyd.omega_t":
            out["vshp"] += v
        else:
            out["other"] += v
    return out


VSHP_ANGLE_STATES = ("vsm.theta", "pll.theta")


def _cos(a: complex, b: complex) -> float:
    if abs(a) == 0 or abs(b) == 0:
        return 0.0
    return float((a * np.conj(b)).real / (abs(a) * abs(b)))


def classify(lam: complex, part: Mapping[str, float], shape: Mapping[str, complex]) -> str:
    """Label a mode from lumped participation and rotor-angle mode shape.

    * ``real``: no oscillatory part.
    * ``control``: SG electromechanical states barely participate, or every
      participating rotor swings in phase (common frequency / governor mode).
    * ``vshp-sg1``: VSHP states participate, Area 1 dominates the SG share
      with SG1 prominent, and the VSHP angle opposes SG1.
    * ``interarea``: both areas participate, the rotors of the dominant area
      swing together and the two areas swing against each other more than
      they swing in common.
    * ``local-areaX``: one area dominates and its two rotors oppose.
    """
    if abs(lam.imag) < 1e-6:
        return "real"
    g = group_participation(part)
    sg = {m: g[m] for m in ("sg1", "sg2", "sg3", "sg4")}
    mech = sum(sg.values())
    if mech < 0.02 or mech + g["vshp"] < 0.2:
        return "control"
    d = {m: complex(shape.get(f"{m}.delta", 0.0)) for m in sg}
    lead = max(sg, key=sg.get)
    active = [m for m in sg if sg[m] >= 0.02]
    v_ang = next((complex(shape[k]) for k in VSHP_ANGLE_STATES if k in shape), 0j)
    a1, a2 = g["sg1"] + g["sg2"], g["sg3"] + g["sg4"]
    if (g["vshp"] >= 0.1 and a1 >= 2 * a2 and g["sg1"] >= 0.5 * max(sg.values())
            and _cos(v_ang, d["sg1"]) < 0.0 and abs(lam.imag) / (2 * np.pi) >= 0.1):
        return "vshp-sg1"
    if all(_cos(d[m], d[lead]) > 0.5 for m in active) and (g["vshp"] < 0.05 or _cos(v_ang, d[lead]) > 0.5):
        return "control"
    # a strongly controlled VSHP can hold Area 1 almost still, so the weaker
    # area may carry little participation; the differential swing of the two
    # area angles against their common swing decides
    coherent = _cos(d["sg1"], d["sg2"]) > 0.0 if a1 >= a2 else _cos(d["sg3"], d["sg4"]) > 0.0
    area1, area2 = 0.5 * (d["sg1"] + d["sg2"]), 0.5 * (d["sg3"] + d["sg4"])
    if min(a1, a2) >= 0.05 * max(a1, a2) and coherent and abs(area2 - area1) > 0.5 * abs(area1 + area2):
        return "interarea"
    if a1 >= a2 and _cos(d["sg1"], d["sg2"]) < 0.0:
        return "local-area1"
    if a2 > a1 and _cos(d["sg3"], d["sg4"]) < 0.0:
        return "local-area2"
    return "control"


def mode_metrics(lam: complex, right_col: np.ndarray, left_row: np.ndarray, labels: Sequence[str]) -> Mode:
    p = participation_factors(right_col, left_row)
    part = dict(zip(labels, map(float, p)))
    shape = dict(zip(labels, right_col))
    return Mode(complex(lam), part, classify(complex(lam), part, shape), shape)


@dataclass
class ModeReport:
    scheme: str
    modes: list[Mode]
    max_residual: float = 0.0

    def oscillatory(self) -> list[Mode]:
        return [m for m in self.modes if m.classification != "real"]

    def by_label(self, label: str) -> list[Mode]:
        return [m for m in self.modes if m.classification == label]

    def to_json(self) -> str:
        return json.dumps({"scheme": self.scheme, "max_residual": self.max_residual,
                           "modes": [m.as_dict() for m in self.modes]}, indent=2)

    def to_text(self) -> str:
        lines = [f"scheme {self.scheme}", f"{'sigma':>10} {'omega':>10} {'f_hz':>8} {'zeta':>8}  class        top states"]
        for m in sorted(self.modes, key=lambda m: -m.sigma):
            top = sorted(m.participation.items(), key=lambda kv: -kv[1])[:3]
            tops = ", ".join(f"{k} {v:.2f}" for k, v in top)
            lines.append(f"{m.sigma:10.4f} {m.omega:10.4f} {m.f_hz:8.4f} {m.zeta:8.4f}  {m.classification:<12} {tops}")
        return "\n".join(lines)


def analyse(lin: LinearModel) -> ModeReport:
    """Eigenvalues of the state matrix with one Mode per eigenvalue (upper half-plane for pairs)."""
    dec = eigen_decompose(lin.A)
    check_conjugate_pairs(dec.values)
    modes = []
    for k, lam in enumerate(dec.values):
        if lam.imag < -1e-9:
            continue
        modes.append(mode_metrics(lam, dec.right[:, k], dec.left[k, :], lin.labels))
    return ModeReport(lin.scheme, modes, float(dec.residuals(lin.A).max()))


def linear_response(lin: LinearModel, dx0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Deviation trajectory exp(A t) dx0 of the linear model, one row per time."""
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, dx0.size))
    if times.size > 1 and np.allclose(np.diff(times), times[1] - times[0]):
        step = scipy.linalg.expm(lin.A * (times[1] - times[0]))
        x = scipy.linalg.expm(lin.A * times[0]) @ dx0
        for i in range(times.size):
            out[i] = x
            x = step @ x
        return out
    for i, t in enumerate(times):
        out[i] = scipy.linalg.expm(lin.A * t) @ dx0
    return out


# --------------------------------------------------------------------------
# comparison across controllers

def _signature(m: Mode) -> np.ndarray:
    g = group_participation(m.participation)
    return np.array([g["sg1"], g["sg2"], g["sg3"], g["sg4"], g["vshp"]])


def mode_distance(a: Mode, b: Mode) -> float:
    """|df|/f_a plus L1 distance of lumped participation signatures."""
    return abs(a.f_hz - b.f_hz) / max(a.f_hz, 1e-6) + float(np.abs(_signature(a) - _signature(b)).sum())


@dataclass
class ComparisonEntry:
    label: str
    scheme: str
    mode: Mode | None
    status: str = "ok"   # ok, degenerate-real, absent
    d_zeta: float = float("nan")
    d_f: float = float("nan")
    zeta_ratio: float = float("nan")

    def as_dict(self) -> dict:
        d = {"label": self.label, "scheme": self.scheme, "status": self.status}
        if self.mode is not None:
            d.update(sigma=self.mode.sigma, omega=self.mode.omega, f_hz=self.mode.f_hz, zeta=self.mode.zeta)
            # no baseline counterpart: null rather than NaN, which is not valid JSON
            d.update({k: (v if math.isfinite(v) else None)
                      for k, v in (("d_zeta", self.d_zeta), ("d_f", self.d_f), ("zeta_ratio", self.zeta_ratio))})
        return d


def representative(report: ModeReport, label: str, reference: Mode | None = None,
                   tie_tol: float = 1e-3) -> tuple[Mode | None, str]:
    """Pick the mode carrying ``label``; nearest to ``reference`` when several qualify."""
    cands = report.by_label(label)
    if not cands:
        if label == "vshp-sg1":
            real = [m for m in report.modes if m.classification == "real"
                    and m.group("vshp") >= 0.15 and m.group("sg1") >= 0.05]
            if real:
                return max(real, key=lambda m: m.group("vshp") * m.group("sg1")), "degenerate-real"
        return None, "absent"
    if len(cands) == 1:
        return cands[0], "ok"
    if reference is None:
        key = {"vshp-sg1": lambda m: m.group("vshp") + m.group("sg1"),
               "interarea": lambda m: sum(m.group(s) for s in ("sg1", "sg2", "sg3", "sg4")),
               "local-area1": lambda m: m.group("sg1") + m.group("sg2"),
               "local-area2": lambda m: m.group("sg3") + m.group("sg4")}[label]
        ranked = sorted(cands, key=key, reverse=True)
        return ranked[0], "ok"
    ranked = sorted(cands, key=lambda m: mode_distance(reference, m))
    if mode_distance(reference, ranked[1]) - mode_distance(reference, ranked[0]) < tie_tol:
        raise ModeMatchAmbiguous(
            f"{report.scheme}: two {label} candidates at {ranked[0].f_hz:.4f} Hz and {ranked[1].f_hz:.4f} Hz "
            f"are equally close to the reference")
    return ranked[0], "ok"


def classify_and_compare(reports: Sequence[ModeReport], baseline: str = "CPC",
                         labels: Sequence[str] = MODE_LABELS) -> list[ComparisonEntry]:
    """Align the oscillatory modes of every report with the baseline report."""
    by_scheme = {r.scheme: r for r in reports}
    base = by_scheme.get(baseline, reports[0])
    out = []
    for label in labels:
        ref, _ = representative(base, label)
        for r in reports:
            m, status = representative(r, label, None if r is base else ref)
            e = ComparisonEntry(label, r.scheme, m, status)
            if m is not None and ref is not None:
                e.d_zeta = m.zeta - ref.zeta
                e.d_f = m.f_hz - ref.f_hz
                e.zeta_ratio = m.zeta / ref.zeta if ref.zeta != 0 else float("nan")
            out.append(e)
    return out


def comparison_json(entries: Sequence[ComparisonEntry]) -> str:
    return json.dumps({"modes": [e.as_dict() for e in entries]}, indent=2)


def comparison_text(entries: Sequence[ComparisonEntry]) -> str:
    head = f"{'mode':<12} {'scheme':<8} {'f_hz':>8} {'zeta':>8} {'d_f':>9} {'d_zeta':>9} {'zeta/base':>9}  status"
    lines = [head, "-" * len(head)]
    for e in entries:
        if e.mode is None:
            lines.append(f"{e.label:<12} {e.scheme:<8} {'-':>8} {'-':>8} {'-':>9} {'-':>9} {'-':>9}  {e.status}")
            continue
        delta = [f"{v:9.4f}" if math.isfinite(v) else f"{'-':>9}" for v in (e.d_f, e.d_zeta)]
        ratio = f"{e.zeta_ratio:9.3f}" if math.isfinite(e.zeta_ratio) else f"{'-':>9}"
        lines.append(f"{e.label:<12} {e.scheme:<8} {e.mode.f_hz:8.4f} {e.mode.zeta:8.4f} {delta[0]} {delta[1]} "
                     f"{ratio}  {e.status}")
    return "\n".join(lines)
