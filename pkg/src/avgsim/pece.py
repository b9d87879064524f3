"""Predict-evaluate-correct-evaluate stepping, one switching period per step.

Each period costs exactly two circuit solves:

1. predict capacitor voltages (forward Euler) and the peak cell current,
   compute the predicted duty, solve the averaged circuit;
2. correct both with the trapezoidal rule using the first solution, compute
   the corrected duty, solve again.

The second solution becomes the history for the next period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from . import avgcell
from .avgcell import CellParams, CellState, CellWarnings
from .netlist import Circuit, ControlGraph, TransientSpec
from .regulator import PeakContext, Regulator
from .solver import AveragedMna, Evaluation, MnaSystem, Solution, solve_step


class SimulationError(RuntimeError):
    def __init__(self, period: int, cause: BaseException):
        self.period = period
        self.cause = cause
        super().__init__(f"period {period}: {cause}")


@dataclass
class SimulationState:
    v_C: List[float]         # capacitor voltages, previous period
    i_C: List[float]         # capacitor currents, previous period
    i_L0: float              # inductor current at the start of this period
    d_prev: float
    v1_prev: float
    v2_prev: float
    x_prev: Any              # last solution vector, or the Evaluation it expands from

    def copy(self) -> "SimulationState":
        x = self.x_prev.copy() if isinstance(self.x_prev, np.ndarray) else self.x_prev
        return SimulationState(list(self.v_C), list(self.i_C), self.i_L0, self.d_prev,
                               self.v1_prev, self.v2_prev, x)


@dataclass
class PeriodRecord:
    n: int
    t: float
    v_C_pred: List[float]
    i_L1_pred: float
    v_C_corr: List[float]
    i_L1_corr: float
    d_pred: float
    d_corr: float
    cell: CellState
    v_C: List[float]
    i_C: List[float]
    solve_count: int = 0
    ev_pred: Optional[Evaluation] = field(default=None, repr=False)
    ev_corr: Optional[Evaluation] = field(default=None, repr=False)
    x_pred: Optional[np.ndarray] = None   # full solution vectors
    x_corr: Optional[np.ndarray] = None


def predict_state(v_C, i_C, C, T_s, i_L0, d_prev, v1_prev, G_L):
    """Forward-Euler capacitor prediction and predicted peak cell current."""
    v_pred = [v + T_s / c * i for v, i, c in zip(v_C, i_C, C)]
    i_L1_pred = i_L0 + G_L * d_prev * v1_prev
    return v_pred, i_L1_pred


def correct_state(v_C, i_C, i_C_pred, C, T_s, i_L0, d_prev, v1_prev, d_pred, v1_pred, G_L):
    """Trapezoidal correction from the first evaluation."""
    v_corr = [v + T_s / (2.0 * c) * (i + ip) for v, i, ip, c in zip(v_C, i_C, i_C_pred, C)]
    i_L1_corr = i_L0 + 0.5 * G_L * (d_prev * v1_prev + d_pred * v1_pred)
    return v_corr, i_L1_corr


def period_count(t_stop: float, fs: float) -> int:
    n = t_stop * fs
    r = round(n)
    if abs(n - r) <= 1e-9 * max(1.0, n):
        return max(int(r), 1)
    return max(int(math.ceil(n)), 1)


class _ProbeResolver:
    """Maps regulator probes to state quantities.

    A node pinned to ground by a voltage source reads the source value; a
    node across a grounded capacitor reads the predicted/corrected capacitor
    voltage; any other node reads the latest solved voltage.
    """

    def __init__(self, circuit: Circuit, mna: AveragedMna, regulator: Regulator):
        self.mna = mna
        self.entries = []
        g = circuit.ground
        for p in regulator.probes:
            if p.node is None:
                self.entries.append((p.name, "cell", None, 1.0))
                continue
            if p.node == g:
                self.entries.append((p.name, "zero", None, 0.0))
                continue
            entry = None
            for src in mna.vsources:
                if g in src.nodes and p.node in src.nodes:
                    entry = (p.name, "source", src, 1.0 if src.nodes[0] == p.node else -1.0)
                    break
            if entry is None:
                for k, cap in enumerate(mna.caps):
                    if g in cap.nodes and p.node in cap.nodes:
                        entry = (p.name, "cap", k, 1.0 if cap.nodes[0] == p.node else -1.0)
                        break
            if entry is None:
                entry = (p.name, "node", mna.node_index[p.node], 1.0)
            self.entries.append(entry)

    def __call__(self, t, v_caps, x_last, i_cell) -> Dict[str, float]:
        out = {}
        for name, kind, ref, sign in self.entries:
            if kind == "cap":
                out[name] = sign * v_caps[ref]
            elif kind == "source":
                out[name] = sign * ref.value(t)
            elif kind == "node":
                if isinstance(x_last, Evaluation):
                    x_last = self.mna.expand(x_last)
                out[name] = float(x_last[ref])
            elif kind == "cell":
                out[name] = i_cell
            else:
                out[name] = 0.0
        return out


class AveragedSimulator:
    """Averaged-engine driver for one circuit and one regulator instance."""

    def __init__(self, circuit: Circuit, graph: ControlGraph):
        self.circuit = circuit
        self.graph = graph
        self.T_s = circuit.T_s
        self.mna = AveragedMna(circuit)
        self.params: CellParams = self.mna.params
        self.regulator = Regulator(graph, self.T_s)
        self.probe = _ProbeResolver(circuit, self.mna, self.regulator)
        self.C = [c.value for c in self.mna.caps]
        self.warn = CellWarnings()
        self.solves = 0

    def solve(self, system: MnaSystem) -> Solution:
        self.solves += 1
        return solve_step(system)

    def _evaluate(self, d: float, d2: float, i_L0: float, v_hist, i_hist, t: float) -> Evaluation:
        """One averaged-circuit solve at fixed ``(d, d2)``."""
        self.solves += 1
        return self.mna.evaluate(d, d2, i_L0, v_hist, i_hist, t)

    def initial_state(self) -> SimulationState:
        """Cold start: capacitors at their initial voltage, cell inert.

        The previous-period duty is the regulator's output at ``t = 0`` and
        the previous port voltages come from an operating-point solve.
        """
        cell = self.circuit.cell
        op = self.mna.operating_point(0.0)
        x = np.zeros(self.mna.size)
        n_nodes = self.mna.n_nodes
        x[:n_nodes] = op.x[:n_nodes]
        v1, v2 = self.mna.port_voltages(x)
        v_C = [c.ic for c in self.mna.caps]
        i_C = [op[f"I({c.name})"] for c in self.mna.caps]
        probes = self.probe(0.0, v_C, x, cell.ic)
        dec = self.regulator.evaluate(probes, 0.0, PeakContext(cell.ic, v1, self.params.G_L))
        return SimulationState(v_C, i_C, cell.ic, dec.duty, v1, v2, x)

    def step_period(self, state: SimulationState, n: int) -> tuple:
        """Advance one period; returns ``(PeriodRecord, next SimulationState)``."""
        record, nxt = self._advance(state, n)
        record.x_pred = self.mna.expand(record.ev_pred)
        record.x_corr = self.mna.expand(record.ev_corr)
        return record, nxt

    def _advance(self, state: SimulationState, n: int) -> tuple:
        t = n * self.T_s
        G = self.params.G_L
        T_s = self.T_s
        mna = self.mna
        reg = self.regulator
        solves0 = self.solves
        i_L0 = state.i_L0

        # predict + evaluate
        v_pred, i_L1_pred = predict_state(state.v_C, state.i_C, self.C, T_s, i_L0,
                                          state.d_prev, state.v1_prev, G)
        probes = self.probe(t, v_pred, state.x_prev, i_L1_pred)
        d_pred = reg.duty(probes, t, i_L0, state.v1_prev, G)
        d2, _ = avgcell.compute_d2_and_mode(d_pred, state.v1_prev, state.v2_prev, self.params, i_L0)
        ev1 = self._evaluate(d_pred, d2, i_L0, state.v_C, state.i_C, t)
        v1_p = ev1.v1
        i_C_pred = mna.capacitor_currents(ev1.v_C, state.v_C, state.i_C)

        # correct + evaluate
        v_corr, i_L1_corr = correct_state(state.v_C, state.i_C, i_C_pred, self.C, T_s, i_L0,
                                          state.d_prev, state.v1_prev, d_pred, v1_p, G)
        probes = self.probe(t, v_corr, ev1, i_L1_corr)
        d_corr = reg.duty(probes, t, i_L0, v1_p, G, commit=True)
        d2, _ = avgcell.compute_d2_and_mode(d_corr, v1_p, ev1.v2, self.params, i_L0)
        ev2 = self._evaluate(d_corr, d2, i_L0, state.v_C, state.i_C, t)
        v1, v2 = ev2.v1, ev2.v2
        v_C = ev2.v_C
        i_C = mna.capacitor_currents(v_C, state.v_C, state.i_C)

        cell = avgcell.make_state(i_L0, d_corr, v1, v2, self.params, self.warn)
        i_next = avgcell.advance_inductor_current(cell, self.params, self.warn)
        record = PeriodRecord(n, t, v_pred, i_L1_pred, v_corr, i_L1_corr, d_pred, d_corr,
                              cell, v_C, i_C, self.solves - solves0, ev1, ev2)
        nxt = SimulationState(v_C, i_C, i_next, d_corr, v1, v2, ev2)
        return record, nxt

    def run(self, spec: Optional[TransientSpec] = None, progress=None) -> "Trace":
        spec = spec or self.circuit.tran
        if spec.t_stop < self.T_s * (1 - 1e-12):
            raise ValueError("t_stop must be at least one switching period")
        periods = period_count(spec.t_stop, self.circuit.fs)
        state = self.initial_state()
        records: List[PeriodRecord] = []
        advance = self._advance
        for n in range(periods):
            try:
                record, state = advance(state, n)
            except Exception as exc:  # surfaced with the period index
                raise SimulationError(n, exc) from exc
            records.append(record)
            if progress is not None:
                progress(record)
        self._expand_records(records)
        return Trace.from_records(self, records)

    def _expand_records(self, records: List[PeriodRecord]):
        """Fill in full solution vectors (one matrix product per pass)."""
        todo = [r for r in records if r.x_corr is None]
        if not todo:
            return
        Xp = self.mna.expand_many([r.ev_pred for r in todo])
        Xc = self.mna.expand_many([r.ev_corr for r in todo])
        for r, xp, xc in zip(todo, Xp, Xc):
            r.x_pred = xp
            r.x_corr = xc


@dataclass
class Trace:
    """Per-period record of averaged quantities.

    ``signals`` maps names to arrays with one entry per period: node
    voltages ``V(<node>)``, capacitor voltages ``VC(<name>)``, and cell
    quantities ``i_L0``, ``i_L1``, ``i_L2``, ``i_L_avg``, ``d``, ``d2``,
    ``v1``, ``v2``, ``i_S1``, ``i_S2``.
    """

    engine: str
    T_s: float
    t: np.ndarray
    signals: Dict[str, np.ndarray]
    mode: List[str]
    solves: int = 0
    records: List[PeriodRecord] = field(default_factory=list)
    cells: List[CellState] = field(default_factory=list)
    circuit: Optional[Circuit] = None

    @property
    def periods(self) -> int:
        return len(self.t)

    @classmethod
    def from_records(cls, sim: AveragedSimulator, records: List[PeriodRecord]) -> "Trace":
        circuit = sim.circuit
        t = np.array([r.t for r in records])
        sim._expand_records(records)
        X = np.array([r.x_corr for r in records]) if records else np.zeros((0, sim.mna.size))
        signals: Dict[str, np.ndarray] = {}
        for node, idx in sim.mna.node_index.items():
            signals[f"V({node})"] = X[:, idx]
        for k, cap in enumerate(sim.mna.caps):
            signals[f"VC({cap.name})"] = np.array([r.v_C[k] for r in records])
        cells = [r.cell for r in records]
        for name in ("i_L0", "i_L1", "i_L2", "d", "d2", "v1", "v2"):
            signals[name] = np.array([getattr(c, name) for c in cells])
        signals["i_S1"] = np.array([c.i_S1_avg for c in cells])
        signals["i_S2"] = np.array([c.i_S2_avg for c in cells])
        signals["i_L_avg"] = signals["i_S1"] + signals["i_S2"]
        signals["d_pred"] = np.array([r.d_pred for r in records])
        return cls("averaged", sim.T_s, t, signals, [c.mode for c in cells], sim.solves,
                   records, cells, circuit)


def step_period(sim: AveragedSimulator, state: SimulationState, n: int):
    return sim.step_period(state, n)


def run_transient(circuit: Circuit, graph: ControlGraph, spec: Optional[TransientSpec] = None) -> Trace:
    return AveragedSimulator(circuit, graph).run(spec)
