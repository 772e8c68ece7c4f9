"""Run configuration: YAML parsing, schema validation, provenance and manifests.

A configuration file has five optional sections::

    network:    {vshp_bus, vshp_mva, vshp_p, vshp_q, slack, dispatch_mw, voltage_setpoints}
    hydraulic:  {T_wt, T_wp, C_s, ...}
    controller: {scheme, <parameter overrides>}
    scenario:   {duration, dt, sample_period, events: [{bus, time, retained}]}
    output:     {directory, formats, signals}

Every value not given in the file takes its default, and the origin of each
effective value ("default", "file" or "override") is kept for the manifest.
"""
from __future__ import annotations

import copy
import os
import tempfile
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

from .controllers import SCHEMES, VIControllerConfig, default_parameters
from .engine import DEFAULT_SIGNALS, PlantConfig, Scenario
from .hydraulic import HydraulicParams
from .network import LoadEvent

OUTPUT_ENV = "VSHPSIM_OUT"
FORMATS = ("csv", "json", "txt")


class SchemaError(ValueError):
    """Invalid configuration; ``problems`` lists (key path, line, message)."""

    def __init__(self, problems: list[tuple[str, int | None, str]]):
        self.problems = problems
        text = "; ".join(f"{k}{f' (line {ln})' if ln else ''}: {msg}" for k, ln, msg in problems)
        super().__init__(text)


def _plant_defaults() -> dict:
    p = PlantConfig()
    return {
        "vshp_bus": p.vshp_bus, "vshp_mva": p.vshp_mva, "vshp_p": p.vshp_p, "vshp_q": p.vshp_q,
        "slack": p.slack, "dispatch_mw": dict(p.dispatch_mw), "voltage_setpoints": dict(p.voltage_setpoints),
    }


def _hydraulic_defaults() -> dict:
    h = HydraulicParams()
    return {f.name: getattr(h, f.name) for f in fields(h)}


def _scenario_defaults() -> dict:
    s = Scenario()
    return {"duration": s.duration, "dt": s.dt, "sample_period": s.sample_period, "events": []}


def _output_defaults() -> dict:
    return {"directory": os.environ.get(OUTPUT_ENV, "results"), "formats": ["csv", "json"],
            "signals": list(DEFAULT_SIGNALS)}


SECTIONS = ("network", "hydraulic", "controller", "scenario", "output")


@dataclass
class RunConfig:
    network: dict
    hydraulic: dict
    controller: dict
    scenario: dict
    output: dict
    provenance: dict[str, str] = field(default_factory=dict)
    source: str | None = None

    # ---- typed views -------------------------------------------------------
    def plant(self) -> PlantConfig:
        n = self.network
        return PlantConfig(vshp_bus=int(n["vshp_bus"]), vshp_mva=float(n["vshp_mva"]), vshp_p=float(n["vshp_p"]),
                           vshp_q=float(n["vshp_q"]), slack=n["slack"], dispatch_mw=dict(n["dispatch_mw"]),
                           voltage_setpoints=dict(n["voltage_setpoints"]))

    def hydraulic_params(self) -> HydraulicParams:
        return HydraulicParams(**self.hydraulic)

    def controller_config(self, scheme: str | None = None) -> VIControllerConfig:
        scheme = scheme or self.controller["scheme"]
        params = {k: v for k, v in self.controller.items() if k != "scheme"}
        if scheme != self.controller["scheme"]:
            # overrides written for another scheme are kept only where they apply
            allowed = default_parameters(scheme)
            params = {k: v for k, v in params.items() if k in allowed}
        return VIControllerConfig(scheme, params)

    def events(self) -> tuple[LoadEvent, ...]:
        return tuple(LoadEvent(int(e["bus"]), float(e["time"]), float(e["retained"]))
                     for e in self.scenario["events"])

    def scenario_spec(self) -> Scenario:
        s = self.scenario
        return Scenario(duration=float(s["duration"]), dt=float(s["dt"]), events=self.events(),
                        sample_period=float(s["sample_period"]), signals=tuple(self.output["signals"]))

    # ---- serialisation -----------------------------------------------------
    def effective(self) -> dict:
        return {s: copy.deepcopy(getattr(self, s)) for s in SECTIONS}

    def manifest(self, extra: dict | None = None) -> dict:
        out = self.effective()
        out["provenance"] = dict(sorted(self.provenance.items()))
        if extra:
            out["run"] = dict(extra)
        return out

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with dotted-path overrides such as ``{"scenario.dt": 0.002}``."""
        new = copy.deepcopy(self)
        for path, value in overrides.items():
            section, _, key = path.partition(".")
            getattr(new, section)[key] = value
            new.provenance[path] = "override"
        problems = _validate(new, {})
        if problems:
            raise SchemaError(problems)
        return new


# --------------------------------------------------------------------------
# parsing

def _compose_with_lines(text: str):
    """Plain data plus a map from dotted key path to 1-based line number."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SchemaError([("<file>", mark.line + 1 if mark else None, f"not valid YAML: {exc}")]) from exc
    lines: dict[str, int] = {}

    def walk(n, path):
        if n is None:
            return
        lines[path or "<root>"] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                walk(v, f"{path}.{k.value}" if path else str(k.value))
                lines[f"{path}.{k.value}" if path else str(k.value)] = k.start_mark.line + 1
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                walk(v, f"{path}[{i}]")

    walk(node, "")
    data = yaml.safe_load(text) if node is not None else {}
    return data or {}, lines


def parse_config(path: str | os.PathLike | None = None, text: str | None = None) -> RunConfig:
    """Read, validate and default a configuration file (or a YAML string)."""
    if text is None:
        if path is None:
            text = ""
        else:
            with open(path) as fh:
                text = fh.read()
    data, lines = _compose_with_lines(text)
    if not isinstance(data, dict):
        raise SchemaError([("<root>", 1, "top level must be a mapping")])

    problems: list[tuple[str, int | None, str]] = []
    for key in data:
        if key not in SECTIONS and key not in ("provenance", "run"):
            problems.append((str(key), lines.get(str(key)), "unknown section"))

    prov: dict[str, str] = {}
    sections = {}
    defaults = {"network": _plant_defaults(), "hydraulic": _hydraulic_defaults(),
                "scenario": _scenario_defaults(), "output": _output_defaults()}
    for name in SECTIONS:
        given = data.get(name) or {}
        if not isinstance(given, dict):
            problems.append((name, lines.get(name), "section must be a mapping"))
            given = {}
        if name == "controller":
            scheme = given.get("scheme", "VSG")
            if scheme not in SCHEMES:
                problems.append(("controller.scheme", lines.get("controller.scheme"),
                                 f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}"))
                scheme = "VSG"
            base = {"scheme": scheme}
            base.update(default_parameters(scheme))
        else:
            base = defaults[name]
        eff = copy.deepcopy(base)
        for key, value in given.items():
            dotted = f"{name}.{key}"
            if key not in base:
                problems.append((dotted, lines.get(dotted), "unknown key"))
                continue
            eff[key] = value
        for key in eff:
            dotted = f"{name}.{key}"
            prov[dotted] = "file" if key in given else "default"
        sections[name] = eff

    # a manifest carries the provenance of the run it came from
    if isinstance(data.get("provenance"), dict):
        for k, v in data["provenance"].items():
            if k in prov and v in ("default", "file", "override"):
                prov[k] = v

    cfg = RunConfig(**sections, provenance=prov, source=os.fspath(path) if path is not None else None)
    problems += _validate(cfg, lines)
    if problems:
        raise SchemaError(problems)
    return cfg


def _num(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _validate(cfg: RunConfig, lines: dict) -> list[tuple[str, int | None, str]]:
    out: list[tuple[str, int | None, str]] = []

    def bad(key, msg):
        out.append((key, lines.get(key), msg))

    n = cfg.network
    if not isinstance(n["vshp_bus"], int) or isinstance(n["vshp_bus"], bool):
        bad("network.vshp_bus", "must be an integer bus number")
    for k in ("vshp_mva", "vshp_p", "vshp_q"):
        if not _num(n[k]):
            bad(f"network.{k}", "must be a number")
    if _num(n["vshp_mva"]) and n["vshp_mva"] <= 0:
        bad("network.vshp_mva", "must be positive")
    if _num(n["vshp_p"]) and not 0 < n["vshp_p"] < 1:
        bad("network.vshp_p", "must lie in (0, 1)")
    for k in ("dispatch_mw", "voltage_setpoints"):
        if not isinstance(n[k], dict) or not all(_num(v) for v in n[k].values()):
            bad(f"network.{k}", "must map machine names to numbers")

    for k, v in cfg.hydraulic.items():
        if not _num(v):
            bad(f"hydraulic.{k}", "must be a number")
    if not out:
        try:
            HydraulicParams(**cfg.hydraulic)
        except ValueError as exc:
            bad("hydraulic", str(exc))

    for k, v in cfg.controller.items():
        if k != "scheme" and not _num(v):
            bad(f"controller.{k}", "must be a number")
    if cfg.controller.get("scheme") in SCHEMES:  # an unknown scheme is reported while parsing
        try:
            cfg.controller_config()
        except ValueError as exc:
            bad("controller", str(exc))

    s = cfg.scenario
    for k in ("duration", "dt", "sample_period"):
        if not _num(s[k]) or s[k] <= 0:
            bad(f"scenario.{k}", "must be a positive number")
    if _num(s["dt"]) and _num(s["sample_period"]) and s["sample_period"] < s["dt"]:
        bad("scenario.sample_period", "must be at least dt")
    if not isinstance(s["events"], list):
        bad("scenario.events", "must be a list")
    else:
        for i, e in enumerate(s["events"]):
            key = f"scenario.events[{i}]"
            if not isinstance(e, dict) or set(e) != {"bus", "time", "retained"}:
                bad(key, "event needs exactly the keys bus, time, retained")
                continue
            if not _num(e["time"]) or (_num(s["duration"]) and not 0 <= e["time"] <= s["duration"]):
                bad(f"{key}.time", "must lie within [0, duration]")
            if not _num(e["retained"]) or e["retained"] < 0:
                bad(f"{key}.retained", "must be a non-negative number")
            if not isinstance(e["bus"], int):
                bad(f"{key}.bus", "must be an integer bus number")

    o = cfg.output
    if not isinstance(o["directory"], str):
        bad("output.directory", "must be a string")
    if not isinstance(o["formats"], list) or not set(o["formats"]) <= set(FORMATS):
        bad("output.formats", f"must be a list drawn from {FORMATS}")
    if not isinstance(o["signals"], list) or not all(isinstance(x, str) for x in o["signals"]):
        bad("output.signals", "must be a list of signal names")
    return out


# --------------------------------------------------------------------------
# writing

def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_yaml(data: Any) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False)


def write_manifest(cfg: RunConfig, path, extra: dict | None = None) -> None:
    atomic_write_text(path, dump_yaml(cfg.manifest(extra)))
