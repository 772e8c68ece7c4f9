"""Command line entry point: ``vshpsim simulate|eigen|compare|seed-scenarios``."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (
    OUTPUT_ENV, RunConfig, SchemaError, atomic_write_text, dump_yaml, parse_config, write_manifest,
)
from .controllers import SCHEMES
from .engine import ConfigInvalid, EquilibriumDiverged, StepDiverged, assemble_system, find_equilibrium, run_scenario
from .network import LowVoltageRegion, NetworkError
from .smallsignal import (
    EigenFailed, ModeMatchAmbiguous, ModeReport, NonEquilibriumPoint, analyse, classify_and_compare,
    comparison_json, comparison_text, numerical_jacobian,
)

EXPECTED_ERRORS = (SchemaError, ConfigInvalid, EquilibriumDiverged, StepDiverged, LowVoltageRegion, NetworkError,
                   NonEquilibriumPoint, EigenFailed, ModeMatchAmbiguous, OSError)

def _build(cfg: RunConfig, scheme: str | None = None):
    return assemble_system(cfg.plant(), cfg.controller_config(scheme), cfg.hydraulic_params())


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.output["directory"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def simulate_one(cfg: RunConfig, scheme: str | None = None) -> Path:
    """Run the configured scenario for one controller; returns the CSV path."""
    scheme = scheme or cfg.controller["scheme"]
    model = _build(cfg, scheme)
    ts = run_scenario(model, cfg.scenario_spec())
    out = _out_dir(cfg)
    csv_path = out / f"{scheme}.csv"
    ts.to_csv(csv_path)
    write_manifest(cfg, out / f"{scheme}.manifest.yaml",
                   {"command": "simulate", "scheme": scheme, **{k: str(v) for k, v in ts.metadata.items()}})
    return csv_path


def eigen_one(cfg: RunConfig, scheme: str | None = None) -> ModeReport:
    """Equilibrium, state matrix and classified modes for one controller."""
    scheme = scheme or cfg.controller["scheme"]
    model = _build(cfg, scheme)
    eq = find_equilibrium(model)
    report = analyse(numerical_jacobian(model, eq.state))
    out = _out_dir(cfg)
    if "json" in cfg.output["formats"]:
        atomic_write_text(out / f"{scheme}.modes.json", report.to_json() + "\n")
    if "txt" in cfg.output["formats"]:
        atomic_write_text(out / f"{scheme}.modes.txt", report.to_text() + "\n")
    return report


def cmd_simulate(cfg: RunConfig) -> int:
    path = simulate_one(cfg)
    print(f"wrote {path}")
    return 0


def cmd_eigen(cfg: RunConfig) -> int:
    report = eigen_one(cfg)
    print(report.to_text())
    print(f"max eigen residual {report.max_residual:.2e}")
    return 0


def _compare_worker(args):
    cfg, scheme, with_sim = args
    report = eigen_one(cfg, scheme)
    if with_sim:
        simulate_one(cfg, scheme)
    return report


def cmd_compare(cfg: RunConfig, controllers: list[str], jobs: int = 1, simulate: bool = True) -> int:
    """Eigen runs for every controller, an aligned mode table and per-controller CSVs."""
    work = [(cfg, s, simulate) for s in controllers]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_compare_worker, work))
    else:
        reports = [_compare_worker(w) for w in work]
    entries = classify_and_compare(reports, baseline="CPC" if "CPC" in controllers else controllers[0])
    out = _out_dir(cfg)
    atomic_write_text(out / "comparison.json", comparison_json(entries) + "\n")
    table = comparison_text(entries)
    atomic_write_text(out / "comparison.txt", table + "\n")
    write_manifest(cfg, out / "compare.manifest.yaml", {"command": "compare", "controllers": list(controllers)})
    print(table)
    return 0


def seed_scenarios() -> dict[str, dict]:
    """Ready-made configurations for the three reference experiments."""
    step7 = {"controller": {"scheme": "VSG"},
             "scenario": {"duration": 130.0, "dt": 0.001, "sample_period": 0.01,
                          "events": [{"bus": 7, "time": 1.0, "retained": 0.5}]}}
    two_events = {"controller": {"scheme": "VSM"},
                  "scenario": {"duration": 130.0, "dt": 0.001, "sample_period": 0.01,
                               "events": [{"bus": 7, "time": 1.0, "retained": 0.5},
                                          {"bus": 9, "time": 1.0, "retained": 0.7}]}}
    compare = {"controller": {"scheme": "CPC"},
               "scenario": {"duration": 60.0, "dt": 0.001, "sample_period": 0.01,
                            "events": [{"bus": 7, "time": 1.0, "retained": 0.5}]},
               "output": {"formats": ["csv", "json", "txt"]}}
    return {"bus7_step.yaml": step7, "bus7_bus9_steps.yaml": two_events, "controller_comparison.yaml": compare}


def cmd_seed(out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    for name, data in seed_scenarios().items():
        parse_config(text=dump_yaml(data))  # every seed must validate
        atomic_write_text(out / name, dump_yaml(data))
        print(f"wrote {out / name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vshpsim", description="VSHP phasor simulation and small-signal analysis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "time-domain run to CSV"), ("eigen", "modal analysis to JSON"),
                        ("compare", "modal comparison across controllers")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML run configuration (defaults when omitted)")
        s.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ENV} or ./results)")
        s.add_argument("--controller", action="append", choices=SCHEMES,
                       help="controller tag; repeatable for compare")
        s.add_argument("--dt", type=float)
        s.add_argument("--duration", type=float)
        if name == "compare":
            s.add_argument("--jobs", type=int, default=1, help="parallel controller runs")
            s.add_argument("--no-simulate", action="store_true", help="skip the per-controller time series")
    s = sub.add_parser("seed-scenarios", help="write ready-made configurations")
    s.add_argument("--out", type=Path, help="target directory (default ./scenarios)")
    return p


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config(text="")
    overrides = {}
    if args.out is not None:
        overrides["output.directory"] = str(args.out)
    if args.dt is not None:
        overrides["scenario.dt"] = args.dt
    if args.duration is not None:
        overrides["scenario.duration"] = args.duration
    if args.controller and args.command != "compare":
        if len(args.controller) > 1:
            raise SchemaError([("--controller", None, f"{args.command} takes a single controller")])
        cfg = _with_scheme(cfg, args.controller[0])
    return cfg.with_overrides(**overrides) if overrides else cfg


def _with_scheme(cfg: RunConfig, scheme: str) -> RunConfig:
    if scheme == cfg.controller["scheme"]:
        return cfg
    data = cfg.manifest()
    data.pop("provenance")
    data["controller"] = {"scheme": scheme}
    new = parse_config(text=dump_yaml(data))
    new.provenance.update({k: v for k, v in cfg.provenance.items() if not k.startswith("controller.")})
    new.provenance["controller.scheme"] = "override"
    return new


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "seed-scenarios":
            return cmd_seed(args.out or Path("scenarios"))
        cfg = _load(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "eigen":
            return cmd_eigen(cfg)
        controllers = args.controller or list(SCHEMES)
        return cmd_compare(cfg, controllers, jobs=args.jobs, simulate=not args.no_simulate)
    except SchemaError as exc:
        for key, line, msg in exc.problems:
            where = f" (line {line})" if line else ""
            print(f"config error: {key}{where}: {msg}", file=sys.stderr)
        return 2
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
