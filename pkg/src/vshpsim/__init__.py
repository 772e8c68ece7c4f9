"""Phasor simulation and small-signal analysis of a variable-speed hydropower unit
with virtual-inertia converter control in a two-area grid."""
from .controllers import SCHEMES, TABLE_I, VIControllerConfig, default_parameters
from .engine import (
    ConfigInvalid, EquilibriumDiverged, PlantConfig, Scenario, StepDiverged, SystemModel, TimeSeries,
    assemble_system, find_equilibrium, integrate_step, run_scenario,
)
from .hydraulic import HydraulicParams
from .network import LoadEvent

__version__ = "0.1.0"
