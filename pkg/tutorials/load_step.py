"""Half of the Bus 7 load is lost at t = 1 s; compare the grid frequency and
the VSHP power for the constant-power baseline and the VSG controller.

    python3 tutorials/load_step.py [duration]
"""
import sys

import numpy as np

from vshpsim import LoadEvent, Scenario, assemble_system, run_scenario

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 20.0
scenario = Scenario(duration=duration, dt=0.001, events=(LoadEvent(bus=7, time=1.0, retained=0.5),),
                    sample_period=0.01, signals=("f", "p_g", "omega_t", "g"))

for scheme in ("CPC", "VSG"):
    ts = run_scenario(assemble_system(controller=scheme), scenario)
    peak = np.abs(ts["f"] - 1.0).max()
    print(f"{scheme:4s} max|df| {peak:.5f} pu   final p_g {ts['p_g'][-1]:.4f} pu   "
          f"final omega_t {ts['omega_t'][-1]:.4f} pu")
    ts.to_csv(f"{scheme}_load_step.csv")
