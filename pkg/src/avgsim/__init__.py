"""Period-stepping averaged simulator for regulated DC-DC converters, with an
exact piecewise-linear reference engine."""

from .avgcell import CCM, DCM, CellParams, CellState, compute_d2_and_mode, make_state
from .exact import ExactSimulator, compare_traces, run_exact
from .netlist import Circuit, ControlGraph, NetlistError, load_netlist, parse_netlist, to_netlist
from .pece import AveragedSimulator, SimulationError, Trace, run_transient
from .regulator import Regulator, bilinear_discretize
from .ripple import Waveform, reconstruct_all
from .solver import SingularCircuitError, build_mna, solve_step

__version__ = "0.1.0"

__all__ = [
    "CCM", "DCM", "CellParams", "CellState", "compute_d2_and_mode", "make_state",
    "ExactSimulator", "compare_traces", "run_exact",
    "Circuit", "ControlGraph", "NetlistError", "load_netlist", "parse_netlist", "to_netlist",
    "AveragedSimulator", "SimulationError", "Trace", "run_transient",
    "Regulator", "bilinear_discretize", "Waveform", "reconstruct_all",
    "SingularCircuitError", "build_mna", "solve_step",
]
