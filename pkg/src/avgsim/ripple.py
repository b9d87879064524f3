"""Instantaneous waveforms rebuilt from an averaged trace.

The inductor current is the piecewise-linear path through ``i_L0``,
``i_L1`` and ``i_L2``. Capacitor voltages get a zero-mean ripple added to
their period average: the integral of the capacitor current's deviation
from its average, with the deviation obtained from the switched cell port
currents through the resistive network's current-division ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .netlist import Circuit
from .solver import MnaSystem, Stamper, solve_step


@dataclass
class Waveform:
    name: str
    t: np.ndarray
    values: np.ndarray
    points_per_period: int

    def __post_init__(self):
        if len(self.t) != len(self.values):
            raise ValueError("time and value arrays differ in length")

    def __len__(self):
        return len(self.t)

    def at(self, t) -> np.ndarray:
        return np.interp(t, self.t, self.values)


def _sample_grid(trace, ppp: int):
    P = trace.periods
    T = trace.T_s
    u = np.arange(ppp) * (T / ppp)
    t = (np.arange(P)[:, None] * T + u[None, :]).ravel()
    t = np.append(t, P * T)
    return u, t


def _cell_arrays(trace):
    s = trace.signals
    i0, i1, i2, d, d2 = s["i_L0"], s["i_L1"], s["i_L2"], s["d"], s["d2"]
    cell = trace.circuit.cell if trace.circuit is not None else None
    if cell is not None and not cell.bidirectional:
        i0, i1, i2, d, d2 = _blocked_fall(i0, i1, i2, d, d2)
    return i0, i1, i2, d, d2, s["i_S1"], s["i_S2"]


def _blocked_fall(i0, i1, i2, d, d2):
    """Unidirectional cell: a falling segment that would cross zero stops
    there (the diode blocks) and the current idles at zero.

    This only happens in the CCM period that starts from a small positive
    current and ends in the first DCM period.
    """
    cross = (i1 > 0.0) & (i2 < 0.0)
    if not np.any(cross):
        return i0, i1, i2, d, d2
    d2 = np.where(cross, d2 * i1 / np.where(cross, i1 - i2, 1.0), d2)
    i2 = np.where(cross, 0.0, i2)
    return i0, i1, i2, d, d2


def _inductor_local(u, T, i0, i1, i2, d, d2):
    """Inductor current at local times ``u`` (one row per period)."""
    a = (d * T)[:, None]
    b = (d2 * T)[:, None]
    i0, i1, i2 = i0[:, None], i1[:, None], i2[:, None]
    u = u[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        rise = i0 + (i1 - i0) * np.where(a > 0, u / np.where(a > 0, a, 1.0), 0.0)
        fall = i1 + (i2 - i1) * np.where(b > 0, (u - a) / np.where(b > 0, b, 1.0), 0.0)
    return np.where(u < a, rise, np.where(u < a + b, fall, i2))


def reconstruct_inductor_current(trace, ppp: Optional[int] = None) -> Waveform:
    ppp = ppp or _default_ppp(trace)
    i0, i1, i2, d, d2, _, _ = _cell_arrays(trace)
    u, t = _sample_grid(trace, ppp)
    vals = _inductor_local(u, trace.T_s, i0, i1, i2, d, d2).ravel()
    vals = np.append(vals, i2[-1] if len(i2) else 0.0)
    if trace.circuit is not None and not trace.circuit.cell.bidirectional:
        # sign-assumption fallbacks can still dip below zero; the diode blocks
        vals = np.maximum(vals, 0.0)
    return Waveform("i_L", t, vals, ppp)


def _default_ppp(trace) -> int:
    if trace.circuit is not None:
        return trace.circuit.tran.points_per_period
    return 100


def capacitor_sensitivity(circuit: Circuit) -> Dict[str, Tuple[float, float]]:
    """Per capacitor, the share of a unit ``i_S1`` and ``i_S2`` injection that
    flows through it when capacitors and voltage sources act as shorts."""
    cell = circuit.cell
    s = float(cell.orientation)
    st = Stamper(circuit.nodes, circuit.ground)
    for r in circuit.resistors:
        st.conductance(*r.nodes, 1.0 / r.value)
    cap_rows = [st.vsource(c.nodes[0], c.nodes[1], f"I({c.name})") for c in circuit.capacitors]
    for src in circuit.sources:
        if src.type == "V":
            st.vsource(src.nodes[0], src.nodes[1], f"I({src.name})")
    A = st.matrix()
    t1, t2, c = (st.node(n) for n in cell.terminals)
    out = {cap.name: [0.0, 0.0] for cap in circuit.capacitors}
    for port, term in ((0, t1), (1, t2)):
        b = np.zeros(st.size)
        if term is not None:
            b[term] -= s
        if c is not None:
            b[c] += s
        if not cap_rows:
            continue
        x = solve_step(MnaSystem(A, b, st.labels)).x
        for cap, row in zip(circuit.capacitors, cap_rows):
            out[cap.name][port] = float(x[row])
    return {k: (v[0], v[1]) for k, v in out.items()}


def _port_integrals(u, T, i0, i1, i2, d, d2):
    """Running integrals of the instantaneous switch and diode currents."""
    a = (d * T)[:, None]
    b = (d2 * T)[:, None]
    i0c, i1c, i2c = i0[:, None], i1[:, None], i2[:, None]
    uu = u[None, :]
    area1 = 0.5 * (i0c + i1c) * a
    area2 = 0.5 * (i1c + i2c) * b
    safe_a = np.where(a > 0, a, 1.0)
    safe_b = np.where(b > 0, b, 1.0)
    I1 = np.where(uu < a, i0c * uu + (i1c - i0c) * uu * uu / (2.0 * safe_a), area1)
    w = uu - a
    I2 = np.where(uu < a, 0.0,
                  np.where(uu < a + b, i1c * w + (i2c - i1c) * w * w / (2.0 * safe_b), area2))
    # exact period integrals of I1 and I2 (for the zero-mean shift)
    J1 = i0 * (d * T) ** 2 / 2 + (i1 - i0) * (d * T) ** 2 / 6 + 0.5 * (i0 + i1) * d * T * (T - d * T)
    J2 = (i1 * (d2 * T) ** 2 / 2 + (i2 - i1) * (d2 * T) ** 2 / 6
          + 0.5 * (i1 + i2) * d2 * T * (T - d * T - d2 * T))
    return I1, I2, J1, J2


def reconstruct_capacitor_voltage(trace, capacitor: str, ppp: Optional[int] = None,
                                  sensitivity: Optional[Tuple[float, float]] = None) -> Waveform:
    """Averaged capacitor voltage plus zero-mean, piecewise-parabolic ripple.

    The deviation integral restarts at every period boundary and is shifted
    so that each period's mean equals the averaged value.
    """
    ppp = ppp or _default_ppp(trace)
    circuit = trace.circuit
    cap = next(c for c in circuit.capacitors if c.name == capacitor)
    alpha1, alpha2 = sensitivity or capacitor_sensitivity(circuit)[capacitor]
    T = trace.T_s
    i0, i1, i2, d, d2, iS1, iS2 = _cell_arrays(trace)
    # averages consistent with the piecewise-linear path
    iS1 = 0.5 * (i0 + i1) * d
    iS2 = 0.5 * (i1 + i2) * d2
    u, t = _sample_grid(trace, ppp)
    I1, I2, J1, J2 = _port_integrals(u, T, i0, i1, i2, d, d2)
    dev = (alpha1 * (I1 - iS1[:, None] * u[None, :]) + alpha2 * (I2 - iS2[:, None] * u[None, :])) / cap.value
    mean_dev = (alpha1 * (J1 - iS1 * T * T / 2) + alpha2 * (J2 - iS2 * T * T / 2)) / (cap.value * T)
    v_avg = trace.signals[f"VC({capacitor})"]
    vals = (v_avg[:, None] + dev - mean_dev[:, None]).ravel()
    if len(v_avg):
        # end point of the last period, continuing its own ripple
        last_dev = (alpha1 * (0.5 * (i0[-1] + i1[-1]) * d[-1] * T - iS1[-1] * T)
                    + alpha2 * (0.5 * (i1[-1] + i2[-1]) * d2[-1] * T - iS2[-1] * T)) / cap.value
        vals = np.append(vals, v_avg[-1] + last_dev - mean_dev[-1])
    else:
        vals = np.append(vals, cap.ic)
    return Waveform(f"VC({capacitor})", t, vals, ppp)


def reconstruct_all(trace, ppp: Optional[int] = None) -> Dict[str, Waveform]:
    ppp = ppp or _default_ppp(trace)
    waves = {"i_L": reconstruct_inductor_current(trace, ppp)}
    sens = capacitor_sensitivity(trace.circuit)
    for cap in trace.circuit.capacitors:
        waves[f"VC({cap.name})"] = reconstruct_capacitor_voltage(trace, cap.name, ppp, sens[cap.name])
    return waves
