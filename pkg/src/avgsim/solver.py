"""Modified nodal analysis over period-averaged quantities.

Capacitors enter through their trapezoidal companion (conductance
``2C/T_s`` in parallel with a history current source); the averaged switching
cell contributes two auxiliary unknowns, its averaged port currents
``i_S1`` and ``i_S2``, whose defining rows are linear in the node voltages
once ``d`` and ``d2`` are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from operator import mul
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .avgcell import CellParams
from .netlist import Circuit, node_index_map

PIVOT_RTOL = 1e-13


class SingularCircuitError(RuntimeError):
    pass


def _floats(seq) -> list:
    return seq.tolist() if isinstance(seq, np.ndarray) else seq


def _history(g: float, v: float, i: float) -> float:
    return g * v + i


class Evaluation(NamedTuple):
    """Result of one averaged-circuit solve.

    ``u`` is the reduced input vector (the full solution is ``F @ u``); ``x``
    is set instead when the solve went through the dense fallback.
    """

    v1: float
    v2: float
    v_C: List[float]
    u: Optional[List[float]]
    x: Optional[np.ndarray]


class Stamper:
    """Accumulates MNA stamps; the ground node has no row."""

    def __init__(self, nodes: Sequence[str], ground: str = "0"):
        self.ground = ground
        self.index: Dict[str, int] = {}
        for n in nodes:
            if n != ground:
                self.index[n] = len(self.index)
        self.labels: List[str] = [f"V({n})" for n in self.index]
        self.entries: List[tuple] = []

    def node(self, name: str) -> Optional[int]:
        return None if name == self.ground else self.index[name]

    def add_unknown(self, label: str) -> int:
        self.labels.append(label)
        return len(self.labels) - 1

    @property
    def size(self) -> int:
        return len(self.labels)

    def add(self, row, col, value):
        if row is not None and col is not None:
            self.entries.append((row, col, value))

    def conductance(self, a: str, b: str, g: float):
        i, j = self.node(a), self.node(b)
        self.add(i, i, g)
        self.add(j, j, g)
        self.add(i, j, -g)
        self.add(j, i, -g)

    def vsource(self, a: str, b: str, label: str) -> int:
        """Branch-current unknown for ``V(a) - V(b) = value``; returns its row."""
        k = self.add_unknown(label)
        i, j = self.node(a), self.node(b)
        self.add(i, k, 1.0)
        self.add(j, k, -1.0)
        self.add(k, i, 1.0)
        self.add(k, j, -1.0)
        return k

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.size, self.size))
        for r, c, v in self.entries:
            m[r, c] += v
        return m


@dataclass
class MnaSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    labels: List[str]
    norm: Optional[float] = None  # infinity norm of ``matrix`` when known

    @property
    def dimension(self) -> int:
        return len(self.labels)


@dataclass
class Solution:
    x: np.ndarray
    labels: List[str]
    iterations: int = 0  # always zero: one linear solve, no Newton loop

    def __getitem__(self, label: str) -> float:
        return float(self.x[self.labels.index(label)])

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.labels, map(float, self.x)))


def _check_pivots(lu, scale: float, labels: Sequence[str]):
    limit = PIVOT_RTOL * max(scale, 1e-300)
    for k in range(lu.shape[0]):
        if abs(lu[k, k]) <= limit:
            raise SingularCircuitError(
                f"singular MNA matrix at unknown {labels[k]}: floating node, "
                "voltage-source loop or capacitor/source loop")


def solve_dense(A: np.ndarray, b: np.ndarray, scale: float, labels: Sequence[str],
                overwrite: bool = False) -> np.ndarray:
    """Solve ``A x = b``; with ``overwrite`` the factorization reuses ``A``."""
    lu, piv, info = lapack.dgetrf(A, overwrite_a=overwrite)
    _check_pivots(lu, scale, labels)
    x, info = lapack.dgetrs(lu, piv, b)
    return x


def solve_step(system: MnaSystem) -> Solution:
    """Dense LU with partial pivoting (LAPACK getrf/getrs).

    A pivot below ``1e-13 * ||A||_inf`` is reported as a singular circuit.
    """
    A = system.matrix
    scale = system.norm
    if scale is None:
        scale = float(np.abs(A).sum(axis=1).max()) if A.size else 0.0
    return Solution(solve_dense(A, system.rhs, scale, system.labels), system.labels)


def residual(system: MnaSystem, solution: Solution) -> float:
    return float(np.max(np.abs(system.matrix @ solution.x - system.rhs)))


class AveragedMna:
    """Pre-assembled MNA for a circuit; only cell rows change per evaluation.

    Unknown order: node voltages (declaration order), voltage-source
    branch currents, then ``i_S1`` and ``i_S2``.
    """

    def __init__(self, circuit: Circuit):
        self.circuit = circuit
        self.T_s = circuit.T_s
        cell = circuit.cell
        self.params = CellParams(cell.L, self.T_s, cell.bidirectional)
        st = Stamper(circuit.nodes, circuit.ground)
        self.node_index = node_index_map(circuit)
        for r in circuit.resistors:
            st.conductance(*r.nodes, 1.0 / r.value)
        self.caps = circuit.capacitors
        self.cap_geq = np.array([2.0 * c.value / self.T_s for c in self.caps])
        self.cap_geq_list = [float(g) for g in self.cap_geq]
        for c, g in zip(self.caps, self.cap_geq):
            st.conductance(*c.nodes, g)
        self.vsources = [s for s in circuit.sources if s.type == "V"]
        self.isources = [s for s in circuit.sources if s.type == "I"]
        self.vsource_rows = [st.vsource(s.nodes[0], s.nodes[1], f"I({s.name})") for s in self.vsources]
        self.isource_nodes = [(st.node(s.nodes[0]), st.node(s.nodes[1])) for s in self.isources]
        self.row_s1 = st.add_unknown(f"I({cell.name}.S1)")
        self.row_s2 = st.add_unknown(f"I({cell.name}.S2)")
        s = float(cell.orientation)
        self.orientation = s
        t1, t2, c = (st.node(n) for n in cell.terminals)
        self.t1, self.t2, self.c = t1, t2, c
        # port-current incidence: outflow s*iS1 at t1, s*iS2 at t2, -s*(iS1+iS2) at c
        st.add(t1, self.row_s1, s)
        st.add(t2, self.row_s2, s)
        st.add(c, self.row_s1, -s)
        st.add(c, self.row_s2, -s)
        st.add(self.row_s1, self.row_s1, 1.0)
        st.add(self.row_s2, self.row_s2, 1.0)
        self.labels = st.labels
        self.base = st.matrix()
        self.base_norm = float(np.abs(self.base).sum(axis=1).max())
        self.size = st.size
        self.cap_pos = [st.node(cp.nodes[0]) for cp in self.caps]
        self.cap_neg = [st.node(cp.nodes[1]) for cp in self.caps]
        n_nodes = len(self.node_index)
        # selector matrices for capacitor voltages and port voltages
        sel = np.zeros((len(self.caps), self.size))
        for k, (p, n) in enumerate(zip(self.cap_pos, self.cap_neg)):
            if p is not None:
                sel[k, p] += 1.0
            if n is not None:
                sel[k, n] -= 1.0
        self.cap_select = sel
        # constant part of rhs history injection: rhs += inject @ I_hist
        self.cap_inject = sel.T.copy()
        self.n_nodes = n_nodes
        self._prepare_update()

    # -- port voltages ------------------------------------------------------
    def node_voltage(self, x, idx):
        return 0.0 if idx is None else x[idx]

    def port_voltages(self, x):
        s = self.orientation
        vc = self.node_voltage(x, self.c)
        v1 = s * (self.node_voltage(x, self.t1) - vc)
        v2 = s * (self.node_voltage(x, self.t2) - vc)
        return float(v1), float(v2)

    def source_values(self, t: float):
        return [src.value(t) for src in self.vsources], [src.value(t) for src in self.isources]

    # -- assembly -----------------------------------------------------------
    def fill(self, A: np.ndarray, b: np.ndarray, d: float, d2: float, i_L0: float,
             v_hist, i_hist, t: float) -> float:
        """Write the system for ``(d, d2)`` into ``A`` and ``b``; returns ``||A||_inf``
        (bounded)."""
        np.copyto(A, self.base)
        G = self.params.G_L
        s = self.orientation
        k1 = 0.5 * d * d * G
        k21 = d * d2 * G
        k22 = 0.5 * d2 * d2 * G
        r1, r2 = self.row_s1, self.row_s2
        t1, t2, c = self.t1, self.t2, self.c
        # iS1 - k1*v1 = d*i_L0 ; v1 = s*(V_t1 - V_c)
        if t1 is not None:
            A[r1, t1] -= k1 * s
            A[r2, t1] -= k21 * s
        if t2 is not None:
            A[r2, t2] -= k22 * s
        if c is not None:
            A[r1, c] += k1 * s
            A[r2, c] += (k21 + k22) * s
        if self.caps:
            np.dot(self.cap_inject, self.cap_geq * v_hist + i_hist, out=b)
        else:
            b.fill(0.0)
        for src, row in zip(self.vsources, self.vsource_rows):
            b[row] = src.value(t)
        for src, (p, n) in zip(self.isources, self.isource_nodes):
            val = src.value(t)
            if p is not None:
                b[p] -= val
            if n is not None:
                b[n] += val
        b[r1] = d * i_L0
        b[r2] = d2 * i_L0
        return max(self.base_norm, 1.0 + 2.0 * (k1 + k21 + k22))

    def build(self, d: float, d2: float, i_L0: float, v_hist, i_hist, t: float) -> MnaSystem:
        """MNA system for one evaluation at fixed ``(d, d2)``."""
        A = np.empty_like(self.base)
        b = np.empty(self.size)
        norm = self.fill(A, b, d, d2, i_L0, np.asarray(v_hist, dtype=float),
                         np.asarray(i_hist, dtype=float), t)
        return MnaSystem(A, b, self.labels, norm)

    # -- rank-two update solve ----------------------------------------------
    def _prepare_update(self):
        """Precompute the duty-independent part of the solution map.

        Only the two cell rows depend on ``(d, d2)``, so each evaluation is a
        rank-two correction (Woodbury identity) of the base inverse. The
        solution is ``x = F @ u`` with ``u`` = (capacitor history currents,
        source values, the two cell-row right-hand sides), where the last two
        entries absorb the correction. ``F`` is ``None`` when the base is
        singular and every evaluation falls back to a dense solve.
        """
        try:
            inv = solve_dense(self.base, np.eye(self.size), self.base_norm, self.labels)
        except SingularCircuitError:
            self._F = None
            return
        cols = [inv @ self.cap_inject[:, k] for k in range(len(self.caps))]
        cols += [inv[:, row] for row in self.vsource_rows]
        for p, n in self.isource_nodes:
            col = np.zeros(self.size)
            if p is not None:
                col -= inv[:, p]
            if n is not None:
                col += inv[:, n]
            cols.append(col)
        cols += [inv[:, self.row_s1], inv[:, self.row_s2]]
        self._F = np.ascontiguousarray(np.column_stack(cols))
        port = np.zeros((2, self.size))
        s = self.orientation
        for r, term in ((0, self.t1), (1, self.t2)):
            if term is not None:
                port[r, term] += s
            if self.c is not None:
                port[r, self.c] -= s
        P = port @ self._F
        self._P1 = P[0].tolist()
        self._P2 = P[1].tolist()
        # port voltages produced by unit cell-row right-hand sides
        self._a = (self._P1[-2], self._P2[-2])
        self._b = (self._P1[-1], self._P2[-1])
        self._Pcap = (self.cap_select @ self._F).tolist()

    def evaluate(self, d: float, d2: float, i_L0: float, v_hist, i_hist, t: float) -> Evaluation:
        """Port and capacitor voltages of the system :meth:`build` would
        assemble, computed without assembling it."""
        if self._F is None:
            return self._evaluate_direct(d, d2, i_L0, v_hist, i_hist, t)
        G = self.params.G_L
        k1 = 0.5 * d * d * G
        k21 = d * d2 * G
        k22 = 0.5 * d2 * d2 * G
        u = list(map(_history, self.cap_geq_list, _floats(v_hist), _floats(i_hist)))
        for src in self.vsources:
            u.append(src.value(t))
        for src in self.isources:
            u.append(src.value(t))
        u.append(d * i_L0)
        u.append(d2 * i_L0)
        # port voltages of the base solution, then the 2x2 capacitance system
        y1 = sum(map(mul, self._P1, u))
        y2 = sum(map(mul, self._P2, u))
        a1, a2 = self._a
        b1, b2 = self._b
        m11 = 1.0 - k1 * a1
        m12 = -k1 * b1
        m21 = -(k21 * a1 + k22 * a2)
        m22 = 1.0 - (k21 * b1 + k22 * b2)
        r1 = -k1 * y1
        r2 = -(k21 * y1 + k22 * y2)
        det = m11 * m22 - m12 * m21
        if abs(det) <= PIVOT_RTOL * max(self.base_norm, 1.0 + 2.0 * (k1 + k21 + k22)):
            return self._evaluate_direct(d, d2, i_L0, v_hist, i_hist, t)
        z1 = (m22 * r1 - m12 * r2) / det
        z2 = (m11 * r2 - m21 * r1) / det
        u[-2] -= z1
        u[-1] -= z2
        v1 = y1 - a1 * z1 - b1 * z2
        v2 = y2 - a2 * z1 - b2 * z2
        v_C = [sum(map(mul, row, u)) for row in self._Pcap]
        return Evaluation(v1, v2, v_C, u, None)

    def expand(self, ev: Evaluation) -> np.ndarray:
        """Full solution vector of an evaluation."""
        return ev.x if ev.x is not None else self._F @ np.array(ev.u)

    def expand_many(self, evs: Sequence[Evaluation]) -> np.ndarray:
        """Solution vectors of many evaluations, one row each."""
        if not evs:
            return np.zeros((0, self.size))
        if self._F is not None and all(ev.x is None for ev in evs):
            return np.array([ev.u for ev in evs]) @ self._F.T
        return np.array([self.expand(ev) for ev in evs])

    def solve_cell(self, d: float, d2: float, i_L0: float, v_hist, i_hist, t: float) -> np.ndarray:
        """Solution vector of the system :meth:`build` would assemble."""
        return self.expand(self.evaluate(d, d2, i_L0, v_hist, i_hist, t))

    def _evaluate_direct(self, d, d2, i_L0, v_hist, i_hist, t) -> Evaluation:
        A = np.empty_like(self.base)
        b = np.empty(self.size)
        norm = self.fill(A, b, d, d2, i_L0, np.asarray(v_hist, dtype=float),
                         np.asarray(i_hist, dtype=float), t)
        x = solve_dense(A, b, norm, self.labels, overwrite=True)
        v1, v2 = self.port_voltages(x)
        return Evaluation(v1, v2, self.capacitor_voltages(x), None, x)

    def capacitor_voltages(self, x) -> List[float]:
        xl = x.tolist() if isinstance(x, np.ndarray) else list(x)
        return [(0.0 if p is None else xl[p]) - (0.0 if n is None else xl[n])
                for p, n in zip(self.cap_pos, self.cap_neg)]

    def capacitor_currents(self, v, v_hist, i_hist) -> List[float]:
        """Trapezoidal companion current for new voltages ``v``."""
        return [g * (vk - vh) - ih for g, vk, vh, ih in
                zip(self.cap_geq_list, v, _floats(v_hist), _floats(i_hist))]

    def capacitor_state(self, x, v_hist, i_hist):
        """Capacitor voltages and currents after a solve (companion relation),
        as lists of floats."""
        v = self.capacitor_voltages(x)
        return v, self.capacitor_currents(v, v_hist, i_hist)

    def operating_point(self, t: float = 0.0, i_L0: float = 0.0) -> Solution:
        """Start-up solution with capacitors pinned at their initial voltage
        and the cell inert (both port currents zero)."""
        st = Stamper(self.circuit.nodes, self.circuit.ground)
        for r in self.circuit.resistors:
            st.conductance(*r.nodes, 1.0 / r.value)
        rows = []
        values = []
        for cap in self.caps:
            rows.append(st.vsource(cap.nodes[0], cap.nodes[1], f"I({cap.name})"))
            values.append(cap.ic)
        for src in self.vsources:
            rows.append(st.vsource(src.nodes[0], src.nodes[1], f"I({src.name})"))
            values.append(src.value(t))
        A = st.matrix()
        b = np.zeros(st.size)
        b[rows] = values
        for src in self.isources:
            val = src.value(t)
            p, n = (st.node(x) for x in src.nodes)
            if p is not None:
                b[p] -= val
            if n is not None:
                b[n] += val
        return solve_step(MnaSystem(A, b, st.labels))


def build_mna(circuit: Circuit, cell_fix, history, t: float, i_L0: float = 0.0) -> MnaSystem:
    """Convenience wrapper: ``cell_fix = (d, d2)``, ``history = (v_C, i_C)``."""
    d, d2 = cell_fix[0], cell_fix[1]
    mna = AveragedMna(circuit)
    v_hist, i_hist = history
    return mna.build(d, d2, i_L0, v_hist, i_hist, t)
