"""Shared fixtures for the closed-loop acceptance runs.

The Bus 7 event runs and the six modal analyses are computed once per session
and reused by every test that needs them.
"""
import pytest

from vshpsim import SCHEMES, LoadEvent, Scenario, assemble_system, find_equilibrium, run_scenario
from vshpsim.smallsignal import analyse, classify_and_compare, numerical_jacobian

EVENT_TIME = 1.0
EVENT_DURATION = 130.0

ACCEPTANCE_LINES: list[str] = []


def event_signals(scheme):
    sig = ["f", "p_g", "omega_t", "g", "saturated"]
    if scheme != "VSM":
        sig.append("omega_g")
    if scheme in ("VSG-PID", "VSM-PID"):
        sig += ["eps", "p_f"]
    return tuple(sig)


@pytest.fixture(scope="session")
def event_runs():
    """130 s with half of the Bus 7 load lost at t = 1 s, every controller."""
    runs = {}
    for scheme in SCHEMES:
        sc = Scenario(duration=EVENT_DURATION, dt=0.001, events=(LoadEvent(7, EVENT_TIME, 0.5),),
                      sample_period=0.01, signals=event_signals(scheme))
        runs[scheme] = run_scenario(assemble_system(controller=scheme), sc)
    return runs


@pytest.fixture(scope="session")
def mode_reports():
    reports = {}
    for scheme in SCHEMES:
        model = assemble_system(controller=scheme)
        reports[scheme] = analyse(numerical_jacobian(model, find_equilibrium(model).state))
    return reports


@pytest.fixture(scope="session")
def comparison(mode_reports):
    return classify_and_compare(list(mode_reports.values()), baseline="CPC")


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the terminal summary, then assert."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
