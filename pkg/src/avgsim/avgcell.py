"""Averaged Cell-A switching cell: subinterval currents, port averages, mode.

Within one switching period the port voltages ``v1`` (inductor voltage while
the switch conducts) and ``v2`` (inductor voltage while the diode or second
switch conducts) are held constant, so the inductor current is piecewise
linear: it ramps from ``i_L0`` to ``i_L1`` over ``d*T_s``, then to ``i_L2``
over ``d2*T_s``, and in DCM idles at zero for the rest of the period.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

log = logging.getLogger(__name__)

CCM = "CCM"
DCM = "DCM"

TOL_I = 1e-9


@dataclass(frozen=True)
class CellParams:
    L: float
    T_s: float
    bidirectional: bool = False

    def __post_init__(self):
        if not (self.L > 0 and self.T_s > 0):
            raise ValueError("L and T_s must be positive")

    @property
    def G_L(self) -> float:
        return self.T_s / self.L


class CellState(NamedTuple):
    """Per-period cell quantities (immutable)."""

    i_L0: float
    i_L1: float
    i_L2: float
    d: float
    d2: float
    mode: str
    v1: float
    v2: float
    i_S1_avg: float
    i_S2_avg: float

    @property
    def i_L_avg(self) -> float:
        return self.i_S1_avg + self.i_S2_avg


@dataclass(frozen=True)
class PortAverages:
    v_L1_avg: float
    v_L2_avg: float

    @property
    def v_L_avg(self) -> float:
        return self.v_L1_avg + self.v_L2_avg


class CellWarnings:
    """Counters for tolerated model violations during a run."""

    def __init__(self):
        self.sign_assumption = 0
        self.negative_current = 0

    def __repr__(self):
        return (f"CellWarnings(sign_assumption={self.sign_assumption}, "
                f"negative_current={self.negative_current})")


def compute_d2_and_mode(d: float, v1: float, v2: float, params: CellParams, i_L0: float,
                        warn: CellWarnings | None = None):
    """Second-subinterval duty ``d2`` and conduction mode.

    DCM is only possible for a unidirectional cell starting the period at
    zero current; the boundary ``d + d2 == 1`` counts as CCM.
    """
    if params.bidirectional or i_L0 > TOL_I:
        return 1.0 - d, CCM
    if v1 <= 0.0 or v2 >= 0.0:
        if d > 0.0 or v2 > 0.0:
            if warn is not None:
                warn.sign_assumption += 1
            log.debug("cell sign assumption violated (v1=%g, v2=%g); using CCM", v1, v2)
            return 1.0 - d, CCM
        # d == 0 and v2 <= 0: the cell stays idle
        return 0.0, DCM
    d2 = -(v1 / v2) * d
    if d + d2 >= 1.0:
        return 1.0 - d, CCM
    return d2, DCM


def averaged_port_currents(d, d2, i_L0, v1, v2, params: CellParams):
    G = params.G_L
    i_s1 = d * i_L0 + 0.5 * d * d * G * v1
    i_s2 = d2 * i_L0 + d * d2 * G * v1 + 0.5 * d2 * d2 * G * v2
    return i_s1, i_s2


def port_averages(d, d2, v1, v2) -> PortAverages:
    return PortAverages(d * v1, d2 * v2)


def subinterval_currents(i_L0, d, d2, v1, v2, params: CellParams):
    G = params.G_L
    i_L1 = i_L0 + G * d * v1
    i_L2 = i_L1 + G * d2 * v2
    return i_L1, i_L2


def make_state(i_L0, d, v1, v2, params: CellParams, warn: CellWarnings | None = None) -> CellState:
    """Complete the cell state for one period at fixed duty and port voltages."""
    d2, mode = compute_d2_and_mode(d, v1, v2, params, i_L0, warn)
    i_L1, i_L2 = subinterval_currents(i_L0, d, d2, v1, v2, params)
    if mode == DCM:
        # Closure: d2 was chosen so that the current returns exactly to zero.
        i_L2 = 0.0
    i_s1, i_s2 = averaged_port_currents(d, d2, i_L0, v1, v2, params)
    return CellState(i_L0, i_L1, i_L2, d, d2, mode, v1, v2, i_s1, i_s2)


def advance_inductor_current(state: CellState, params: CellParams,
                             warn: CellWarnings | None = None) -> float:
    """Inductor current at the start of the next period."""
    if state.mode == DCM:
        return 0.0
    i_next = state.i_L0 + params.G_L * (state.d * state.v1 + state.d2 * state.v2)
    if not params.bidirectional and i_next < 0.0:
        if i_next < -TOL_I:
            if warn is not None:
                warn.negative_current += 1
            log.debug("diode would block: next i_L0=%g clamped to 0", i_next)
        return 0.0
    return i_next
