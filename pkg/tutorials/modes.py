"""Linearise every controller at its equilibrium and tabulate the interarea,
local and VSHP-SG1 modes against the constant-power baseline.

    python3 tutorials/modes.py
"""
from vshpsim import SCHEMES, assemble_system, find_equilibrium
from vshpsim.smallsignal import analyse, classify_and_compare, comparison_text, numerical_jacobian

reports = []
for scheme in SCHEMES:
    model = assemble_system(controller=scheme)
    lin = numerical_jacobian(model, find_equilibrium(model).state)
    reports.append(analyse(lin))

print(comparison_text(classify_and_compare(reports, baseline="CPC")))
