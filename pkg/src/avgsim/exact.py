"""Exact piecewise-linear reference simulator.

The switching cell is expanded into ideal switches. Each conduction
topology (switch on, diode on, both off) is a linear time-invariant
state-space system, propagated in closed form through its eigen
decomposition. Switching instants (peak-current comparator, diode current
zero crossing, diode re-conduction) are located with a second-order
(Halley) Newton iteration on the guard function; the clock edge from the
regulator is a known time.

Sources are sampled at the start of every period and held for the period,
like in the averaged engine, so both engines see identical inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .netlist import Circuit, ControlGraph, TransientSpec
from .pece import SimulationError, Trace, period_count
from .regulator import Regulator
from .ripple import Waveform
from .solver import SingularCircuitError, Stamper

log = logging.getLogger(__name__)

ON, OFF, IDLE = "on", "off", "idle"
COND_LIMIT = 1e8
MAX_EVENTS = 16
EVENT_RTOL = 1e-10
DEFAULT_PPP = 1000


@dataclass
class StateSpaceSystem:
    """``dx/dt = A x + B u``, ``y = C x + D u``.

    State order: inductor current, then capacitor voltages. Inputs: voltage
    sources then current sources. Outputs: non-ground node voltages.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    state_labels: List[str]
    input_labels: List[str]
    output_labels: List[str]
    topology: str


@dataclass
class SwitchEvent:
    t: float
    kind: str  # "duty-edge", "diode-zero-crossing", "comparator-crossing", "diode-reconduction"
    residual: float
    iterations: int = 0


def build_state_space(circuit: Circuit, topology: str) -> StateSpaceSystem:
    """Linear system for one conduction pattern of the cell.

    Capacitors are replaced by voltage sources at their state value and the
    inductor by a current source at its state value; the resulting resistive
    network is solved once per state/input unit vector (superposition).
    """
    cell = circuit.cell
    t1, t2, common = cell.terminals
    x_node = f"{cell.name}#x"
    nodes = list(circuit.nodes) + [x_node]
    st = Stamper(nodes, circuit.ground)
    for r in circuit.resistors:
        st.conductance(*r.nodes, 1.0 / r.value)
    caps = circuit.capacitors
    cap_rows = [st.vsource(c.nodes[0], c.nodes[1], f"I({c.name})") for c in caps]
    vsrc = [s for s in circuit.sources if s.type == "V"]
    isrc = [s for s in circuit.sources if s.type == "I"]
    v_rows = [st.vsource(s.nodes[0], s.nodes[1], f"I({s.name})") for s in vsrc]
    if topology == ON:
        st.vsource(t1, x_node, "I(S1)")
    elif topology == OFF:
        st.vsource(t2, x_node, "I(S2)")
    elif topology == IDLE:
        st.vsource(x_node, common, "I(Lclamp)")
    else:
        raise ValueError(f"unknown topology {topology!r}")
    M = st.matrix()
    n_state = 1 + len(caps)
    n_in = len(vsrc) + len(isrc)
    rhs = np.zeros((st.size, n_state + n_in))
    s = float(cell.orientation)
    ix, ic = st.node(x_node), st.node(common)
    # inductor current: flows x -> common when s=+1, common -> x when s=-1
    if ix is not None:
        rhs[ix, 0] -= s
    if ic is not None:
        rhs[ic, 0] += s
    for k, row in enumerate(cap_rows):
        rhs[row, 1 + k] = 1.0
    for k, row in enumerate(v_rows):
        rhs[row, n_state + k] = 1.0
    for k, src in enumerate(isrc):
        p, n = st.node(src.nodes[0]), st.node(src.nodes[1])
        if p is not None:
            rhs[p, n_state + len(vsrc) + k] -= 1.0
        if n is not None:
            rhs[n, n_state + len(vsrc) + k] += 1.0
    try:
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        R = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        raise SingularCircuitError(f"degenerate topology '{topology}': capacitor/source loop "
                                   "or floating node") from None
    # derivative rows
    dot = np.zeros((n_state, st.size))
    vx = np.zeros(st.size)
    if ix is not None:
        vx[ix] += s
    if ic is not None:
        vx[ic] -= s
    dot[0] = vx / cell.L
    for k, (cap, row) in enumerate(zip(caps, cap_rows)):
        dot[1 + k, row] = 1.0 / cap.value
    n_nodes = len(circuit.nodes) - 1
    out_sel = np.zeros((n_nodes, st.size))
    out_labels = []
    for j, node in enumerate(n for n in circuit.nodes if n != circuit.ground):
        out_sel[j, st.node(node)] = 1.0
        out_labels.append(f"V({node})")
    full = dot @ R
    outs = out_sel @ R
    A, B = full[:, :n_state], full[:, n_state:]
    if topology == IDLE:
        A[0, :] = 0.0
        B[0, :] = 0.0
    return StateSpaceSystem(
        A=A, B=B, C=outs[:, :n_state], D=outs[:, n_state:],
        state_labels=["i_L"] + [f"VC({c.name})" for c in caps],
        input_labels=[s.name for s in vsrc] + [s.name for s in isrc],
        output_labels=out_labels,
        topology=topology,
    )


class Propagator:
    """Closed-form solution of ``dx/dt = A x + w`` with ``w`` constant.

    Uses ``A = V diag(lam) V^-1``; when ``V`` is ill-conditioned (repeated or
    nearly repeated eigenvalues) falls back to the matrix exponential of the
    augmented matrix ``[[A, w], [0, 0]]``.
    """

    def __init__(self, A: np.ndarray, cond_limit: float = COND_LIMIT):
        self.A = np.asarray(A, dtype=float)
        self.n = self.A.shape[0]
        lam, V = np.linalg.eig(self.A)
        cond = np.linalg.cond(V) if self.n else 1.0
        self.use_eig = bool(np.isfinite(cond) and cond <= cond_limit)
        self.cond = cond
        if self.use_eig:
            self.lam = lam
            self.V = V
            self.Vinv = np.linalg.inv(V)
            self.real = bool(np.all(np.isreal(lam)))
            if self.real:
                self.lam = lam.real
                self.V = V.real
                self.Vinv = self.Vinv.real

    def _phi(self, taus):
        lt = self.lam[None, :] * taus[:, None]
        small = np.abs(lt) < 1e-8
        with np.errstate(divide="ignore", invalid="ignore"):
            phi1 = np.where(small, taus[:, None] * (1.0 + 0.5 * lt),
                            np.expm1(lt) / np.where(self.lam == 0, 1.0, self.lam)[None, :])
        return np.exp(lt), phi1

    def at(self, x0, w, taus) -> np.ndarray:
        """States at the offsets ``taus`` (shape ``(len(taus), n)``)."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        x0 = np.asarray(x0, dtype=float)
        w = np.asarray(w, dtype=float)
        if self.use_eig:
            e, phi1 = self._phi(taus)
            c0 = self.Vinv @ x0
            cw = self.Vinv @ w
            out = (e * c0[None, :] + phi1 * cw[None, :]) @ self.V.T
            return out.real if np.iscomplexobj(out) else out
        return np.array([self._augmented(x0, w, tau) for tau in taus])

    def _augmented(self, x0, w, tau):
        n = self.n
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = self.A * tau
        M[:n, n] = w * tau
        E = expm(M)
        return E[:n, :n] @ x0 + E[:n, n]

    def derivatives(self, x, w):
        xd = self.A @ x + w
        return xd, self.A @ xd


def propagate(system: StateSpaceSystem, x0, u, dt: float, prop: Optional[Propagator] = None):
    prop = prop or Propagator(system.A)
    return prop.at(x0, system.B @ np.asarray(u, dtype=float), [dt])[0]


def expm_reference(A: np.ndarray, t: float) -> np.ndarray:
    """Scaling-and-squaring matrix exponential, used to cross-check."""
    return expm(np.asarray(A, dtype=float) * t)


@dataclass
class Guard:
    """Affine guard ``h(x, tau) = g . x + g_t * tau + g0``."""

    g: np.ndarray
    g_t: float = 0.0
    g0: float = 0.0
    scale: float = 1.0

    def value(self, x, tau):
        return float(self.g @ x + self.g_t * tau + self.g0)


def find_switch_instant(prop: Propagator, x0, w, guard: Guard, window: Tuple[float, float],
                        kind: str = "event", grid: int = 8, rising: Optional[bool] = None,
                        max_iter: int = 50) -> Optional[SwitchEvent]:
    """First sign change of ``guard`` along the trajectory inside ``window``.

    A coarse pre-scan brackets the root; Halley's update (using the first
    and second time derivatives of the guard) refines it, with bisection
    whenever a step leaves the bracket. Returns ``None`` without a crossing.
    """
    t_lo, t_hi = window
    if t_hi <= t_lo:
        return None
    taus = np.linspace(t_lo, t_hi, grid + 1)
    xs = prop.at(x0, w, taus)
    hs = xs @ guard.g + guard.g_t * taus + guard.g0
    tol = EVENT_RTOL * max(guard.scale, 1e-30)
    k = None
    for j in range(grid):
        a, b = hs[j], hs[j + 1]
        if rising is None:
            hit = (a < 0 <= b) or (a > 0 >= b)
        elif rising:
            hit = a < 0 <= b
        else:
            hit = a > 0 >= b
        if hit:
            k = j
            break
    if k is None:
        return None
    a, b = taus[k], taus[k + 1]
    ha = hs[k]
    t, h, x = a, ha, xs[k]
    updates = 0
    while abs(h) > tol and updates < max_iter:
        if (h < 0) == (ha < 0):
            a = t
        else:
            b = t
        if b - a <= 4e-16 * max(abs(b), 1e-30):
            break
        xd, xdd = prop.derivatives(x, w)
        h1 = float(guard.g @ xd + guard.g_t)
        h2 = float(guard.g @ xdd)
        den = 2.0 * h1 * h1 - h * h2
        t_new = t - 2.0 * h * h1 / den if den != 0.0 else float("nan")
        if not (a < t_new < b):
            t_new = 0.5 * (a + b)
        t = t_new
        x = prop.at(x0, w, [t])[0]
        h = guard.value(x, t)
        updates += 1
    return SwitchEvent(float(t), kind, h, updates)


@dataclass
class _Segment:
    topology: str
    start: float
    end: float
    x0: np.ndarray


class ExactSimulator:
    """Reference simulator with ideal switches and event location."""

    def __init__(self, circuit: Circuit, graph: ControlGraph, ppp: int = DEFAULT_PPP):
        self.circuit = circuit
        self.T_s = circuit.T_s
        self.ppp = ppp
        self.regulator = Regulator(graph, self.T_s)
        self.systems = {tp: build_state_space(circuit, tp) for tp in (ON, OFF, IDLE)}
        self.props = {tp: Propagator(sysm.A) for tp, sysm in self.systems.items()}
        self.bidirectional = circuit.cell.bidirectional
        self.caps = circuit.capacitors
        self.vsrc = [s for s in circuit.sources if s.type == "V"]
        self.isrc = [s for s in circuit.sources if s.type == "I"]
        self.out_labels = self.systems[ON].output_labels
        self.events: List[SwitchEvent] = []
        self.fallbacks = sum(not p.use_eig for p in self.props.values())
        self._probe_plan = self._plan_probes()

    def _plan_probes(self):
        plan = []
        g = self.circuit.ground
        for p in self.regulator.probes:
            if p.node is None:
                plan.append((p.name, "cell", None, 1.0))
            elif p.node == g:
                plan.append((p.name, "zero", None, 0.0))
            else:
                entry = None
                for k, cap in enumerate(self.caps):
                    if g in cap.nodes and p.node in cap.nodes:
                        entry = (p.name, "state", 1 + k, 1.0 if cap.nodes[0] == p.node else -1.0)
                        break
                if entry is None:
                    entry = (p.name, "out", self.out_labels.index(f"V({p.node})"), 1.0)
                plan.append(entry)
        return plan

    def inputs(self, t: float) -> np.ndarray:
        return np.array([s.value(t) for s in self.vsrc] + [s.value(t) for s in self.isrc])

    def initial_state(self) -> np.ndarray:
        return np.array([self.circuit.cell.ic] + [c.ic for c in self.caps], dtype=float)

    def _probes(self, x, u, topology, i_peak):
        sysm = self.systems[topology]
        out = {}
        y = None
        for name, kind, ref, sign in self._probe_plan:
            if kind == "state":
                out[name] = sign * x[ref]
            elif kind == "out":
                if y is None:
                    y = sysm.C @ x + sysm.D @ u
                out[name] = y[ref]
            elif kind == "cell":
                out[name] = i_peak
            else:
                out[name] = 0.0
        return out

    def _diode_blocks(self, x, w_off) -> bool:
        """True when the off-state would drive the current negative from zero."""
        slope = self.systems[OFF].A[0] @ x + w_off[0]
        return x[0] <= 1e-12 and slope <= 0.0

    def period(self, n: int, x: np.ndarray, prev_top: str, i_peak_prev: float):
        """Segments of period ``n`` and the state at its end."""
        T = self.T_s
        t0 = n * T
        u = self.inputs(t0)
        w = {tp: self.systems[tp].B @ u for tp in (ON, OFF, IDLE)}
        probes = self._probes(x, u, prev_top, i_peak_prev)
        dec = self.regulator.evaluate(probes, t0, None, commit=True)
        d_clock = dec.clock_duty
        segments: List[_Segment] = []
        tau = 0.0
        i_peak = x[0]
        t_off = 0.0
        if d_clock > 0.0:
            end = d_clock * T
            event = None
            if dec.peak is not None:
                I_ref, I_slope = dec.peak
                guard = Guard(np.eye(len(x))[0], I_slope / T, -I_ref, max(abs(I_ref), 1.0))
                if guard.value(x, 0.0) >= 0.0:
                    end = 0.0
                else:
                    event = find_switch_instant(self.props[ON], x, w[ON], guard, (0.0, end),
                                                "comparator-crossing", rising=True)
                    if event is not None:
                        end = event.t
                        self.events.append(event)
            if end > 0.0:
                segments.append(_Segment(ON, 0.0, end, x))
                x = self.props[ON].at(x, w[ON], [end])[0]
                tau = end
            t_off = tau
            i_peak = x[0]
        top = OFF
        if not self.bidirectional and self._diode_blocks(x, w[OFF]):
            top = IDLE
            x = x.copy()
            x[0] = 0.0
        changes = 0
        while tau < T:
            changes += 1
            if changes > MAX_EVENTS:
                raise RuntimeError(f"more than {MAX_EVENTS} topology changes in period {n}")
            event = None
            if not self.bidirectional:
                if top == OFF:
                    guard = Guard(np.eye(len(x))[0], 0.0, 0.0, max(abs(x[0]), 1e-3))
                    event = find_switch_instant(self.props[OFF], x, w[OFF], guard, (0.0, T - tau),
                                                "diode-zero-crossing", rising=False)
                elif top == IDLE:
                    sys_off = self.systems[OFF]
                    guard = Guard(sys_off.A[0], 0.0, float(w[OFF][0]), 1.0 / self.circuit.cell.L)
                    event = find_switch_instant(self.props[IDLE], x, w[IDLE], guard, (0.0, T - tau),
                                                "diode-reconduction", rising=True)
            if event is None:
                end = T
            else:
                end = tau + event.t
                self.events.append(event)
            segments.append(_Segment(top, tau, end, x))
            x = self.props[top].at(x, w[top], [end - tau])[0]
            if end >= T:
                tau = T
                break
            tau = end
            if top == OFF:
                x = x.copy()
                x[0] = 0.0  # the zero crossing is exact up to the event tolerance
                top = IDLE
            else:
                top = OFF
        return segments, x, u, w, top, i_peak, t_off

    def run(self, spec: Optional[TransientSpec] = None, keep_waveforms: bool = True):
        spec = spec or self.circuit.tran
        T = self.T_s
        periods = period_count(spec.t_stop, self.circuit.fs)
        ppp = self.ppp
        n_state = 1 + len(self.caps)
        n_out = len(self.out_labels)
        local = np.arange(ppp) * (T / ppp)
        if keep_waveforms:
            xs_all = np.empty((periods * ppp + 1, n_state))
            ys_all = np.empty((periods * ppp + 1, n_out))
        avg_x = np.empty((periods, n_state))
        avg_y = np.empty((periods, n_out))
        i_start = np.empty(periods)
        i_peak = np.empty(periods)
        duty = np.empty(periods)
        d2 = np.empty(periods)
        modes: List[str] = []
        x = self.initial_state()
        top = OFF
        peak_prev = x[0]
        xs = np.empty((ppp, n_state))
        ys = np.empty((ppp, n_out))
        for n in range(periods):
            i_start[n] = x[0]
            try:
                segs, x_end, u, w, top, peak_prev, t_on = self.period(n, x, top, peak_prev)
            except Exception as exc:  # surfaced with the period index
                raise SimulationError(n, exc) from exc
            for seg in segs:
                lo = int(np.searchsorted(local, seg.start, "left"))
                hi = int(np.searchsorted(local, seg.end, "left")) if seg.end < T else ppp
                if hi <= lo:
                    continue
                sysm = self.systems[seg.topology]
                xs[lo:hi] = self.props[seg.topology].at(seg.x0, w[seg.topology], local[lo:hi] - seg.start)
                ys[lo:hi] = xs[lo:hi] @ sysm.C.T + sysm.D @ u
            avg_x[n] = xs.mean(axis=0)
            avg_y[n] = ys.mean(axis=0)
            i_peak[n] = peak_prev
            duty[n] = t_on / T
            cond = sum(s.end - s.start for s in segs if s.topology == OFF)
            d2[n] = cond / T
            modes.append("DCM" if any(s.topology == IDLE for s in segs) else "CCM")
            if keep_waveforms:
                xs_all[n * ppp:(n + 1) * ppp] = xs
                ys_all[n * ppp:(n + 1) * ppp] = ys
            x = x_end
        t = np.arange(periods) * T
        signals: Dict[str, np.ndarray] = {}
        for j, label in enumerate(self.out_labels):
            signals[label] = avg_y[:, j]
        for k, cap in enumerate(self.caps):
            signals[f"VC({cap.name})"] = avg_x[:, 1 + k]
        signals["i_L0"] = i_start
        signals["i_L1"] = i_peak
        signals["i_L_avg"] = avg_x[:, 0]
        signals["d"] = duty
        signals["d2"] = d2
        trace = Trace("exact", T, t, signals, modes, 0, circuit=self.circuit)
        waves: Dict[str, Waveform] = {}
        if keep_waveforms:
            xs_all[-1] = x
            sysm = self.systems[top]
            u_end = self.inputs((periods - 1) * T)
            ys_all[-1] = sysm.C @ x + sysm.D @ u_end
            tt = np.append((np.arange(periods)[:, None] * T + local[None, :]).ravel(), periods * T)
            waves["i_L"] = Waveform("i_L", tt, xs_all[:, 0], ppp)
            for k, cap in enumerate(self.caps):
                name = f"VC({cap.name})"
                waves[name] = Waveform(name, tt, xs_all[:, 1 + k], ppp)
            for j, label in enumerate(self.out_labels):
                waves[label] = Waveform(label, tt, ys_all[:, j], ppp)
        return trace, waves


def run_exact(circuit: Circuit, graph: ControlGraph, spec: Optional[TransientSpec] = None,
              ppp: int = DEFAULT_PPP, keep_waveforms: bool = True):
    return ExactSimulator(circuit, graph, ppp).run(spec, keep_waveforms)


# ----------------------------------------------------------------------------
# Comparison
# ----------------------------------------------------------------------------

@dataclass
class SignalError:
    name: str
    max_abs: float
    scale: float
    normalized: float
    t_worst: float
    avg_max_abs: float = float("nan")
    avg_normalized: float = float("nan")


@dataclass
class ErrorReport:
    signals: Dict[str, SignalError] = field(default_factory=dict)

    @property
    def worst(self) -> Optional[SignalError]:
        if not self.signals:
            return None
        return max(self.signals.values(), key=lambda e: e.normalized)


def _scale(values: np.ndarray) -> float:
    tail = values[int(0.9 * len(values)):]
    s = abs(float(np.mean(tail))) if len(tail) else 0.0
    if s < 1e-12:
        s = float(np.max(np.abs(values))) if len(values) else 0.0
    return s if s > 0 else 1.0


def compare_traces(avg, exact, t_from: float = 0.0, signals: Optional[Sequence[str]] = None,
                   avg_trace: Optional[Trace] = None, exact_trace: Optional[Trace] = None) -> ErrorReport:
    """Worst-case deviation of ``avg`` waveforms from ``exact`` waveforms.

    Both arguments map signal names to :class:`Waveform`. Deviations are
    normalized by the exact signal's steady-state magnitude (mean over the
    last 10 % of the horizon). Only samples at ``t >= t_from`` count. When
    both traces are given, per-period averages are compared as well.
    """
    names = signals or [k for k in exact if k in avg]
    report = ErrorReport()
    for name in names:
        we, wa = exact[name], avg[name]
        if abs(we.t[-1] - wa.t[-1]) > 0.5 * (we.t[1] - we.t[0] if len(we.t) > 1 else 0.0) + 1e-15:
            raise ValueError(f"horizon mismatch for {name}: {wa.t[-1]} vs {we.t[-1]}")
        if len(we.t) == len(wa.t) and np.array_equal(we.t, wa.t):
            va = wa.values
        else:
            va = np.interp(we.t, wa.t, wa.values)
        mask = we.t >= t_from
        diff = np.abs(va - we.values)[mask]
        scale = _scale(we.values)
        k = int(np.argmax(diff)) if diff.size else 0
        err = SignalError(name, float(diff[k]) if diff.size else 0.0, scale,
                          float(diff[k]) / scale if diff.size else 0.0,
                          float(we.t[mask][k]) if diff.size else 0.0)
        key = name if name != "i_L" else "i_L_avg"
        if avg_trace is not None and exact_trace is not None and key in avg_trace.signals \
                and key in exact_trace.signals:
            pm = exact_trace.t >= t_from
            dev = np.abs(avg_trace.signals[key] - exact_trace.signals[key])[pm]
            if dev.size:
                err.avg_max_abs = float(dev.max())
                err.avg_normalized = err.avg_max_abs / _scale(exact_trace.signals[key])
        report.signals[name] = err
    return report
