"""Constant-frequency regulator evaluated once per switching period.

The regulator is a small dataflow graph of blocks (see
:class:`avgsim.netlist.ControlGraph`). Every duty-producing block yields a
candidate; the applied duty is the smallest candidate, clamped to
``[0, d_max]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .netlist import (BlockDecl, ControlGraph, NetlistError, is_number, parse_value,
                      topological_blocks)

log = logging.getLogger(__name__)

PEAK_DEN_GUARD = 1e-12


def bilinear_discretize(num: Sequence[float], den: Sequence[float], T_s: float):
    """Tustin transform of ``H(s) = num(s)/den(s)``.

    Coefficients are in ascending powers: ``num[k]`` multiplies ``s**k``.
    Returns ``(b, a)`` in ascending powers of ``z**-1`` with ``a[0] == 1``.
    """
    num = np.trim_zeros(np.asarray(num, dtype=float), "b")
    den = np.trim_zeros(np.asarray(den, dtype=float), "b")
    if den.size == 0:
        raise ValueError("denominator is zero")
    if num.size == 0:
        num = np.zeros(1)
    n = den.size - 1
    if num.size - 1 > n:
        raise ValueError("improper transfer function: numerator degree exceeds denominator degree")
    K = 2.0 / T_s
    minus = np.array([1.0, -1.0])  # 1 - z^-1
    plus = np.array([1.0, 1.0])    # 1 + z^-1

    def mapped(coeffs):
        out = np.zeros(n + 1)
        for k, c in enumerate(coeffs):
            if c == 0.0:
                continue
            term = P.polymul(P.polypow(minus, k), P.polypow(plus, n - k)) * (c * K ** k)
            out[: term.size] += term
        return out

    b = mapped(num)
    a = mapped(den)
    if a[0] == 0.0:
        raise ValueError("bilinear map produced a0 = 0 (pole at s = 2/T_s)")
    return b / a[0], a / a[0]


class DiscreteTF:
    """Direct-form ``y[n] = sum b_k u[n-k] - sum_{k>=1} a_k y[n-k]``."""

    def __init__(self, b: Sequence[float], a: Sequence[float]):
        b = np.asarray(b, dtype=float)
        a = np.asarray(a, dtype=float)
        if a[0] == 0.0:
            raise ValueError("a[0] must be nonzero")
        self.b = [float(v) for v in b / a[0]]
        self.a = [float(v) for v in a / a[0]]
        order = max(len(self.a), len(self.b)) - 1
        self.u_hist = [0.0] * order
        self.y_hist = [0.0] * order

    @property
    def order(self) -> int:
        return len(self.u_hist)

    def peek(self, u: float) -> float:
        y = self.b[0] * u
        for k in range(1, len(self.b)):
            y += self.b[k] * self.u_hist[k - 1]
        for k in range(1, len(self.a)):
            y -= self.a[k] * self.y_hist[k - 1]
        return y

    def step(self, u: float) -> float:
        y = self.peek(u)
        if self.u_hist:
            self.u_hist.insert(0, u)
            self.u_hist.pop()
            self.y_hist.insert(0, y)
            self.y_hist.pop()
        return y

    def reset(self, u0: float = 0.0, y0: float = 0.0):
        self.u_hist = [u0] * self.order
        self.y_hist = [y0] * self.order


def dtf_step(block: DiscreteTF, u: float) -> float:
    return block.step(u)


def duty_from_peak_limit(I_ref: float, i_L0: float, I_slope: float, G_L: float, v1: float,
                         warn: Optional[list] = None) -> float:
    """Duty at which the rising inductor current meets the (slope-compensated)
    peak reference, clamped to ``[0, 1]``."""
    den = I_slope + G_L * v1
    if den <= PEAK_DEN_GUARD:
        if warn is not None:
            warn.append("peak-limit denominator not positive; limit inactive")
        return 1.0
    d = (I_ref - i_L0) / den
    return min(max(d, 0.0), 1.0)


@dataclass
class PeakContext:
    """Cell quantities the peak-limit law needs: ``i_L0``, ``v1`` and ``G_L``."""

    i_L0: float
    v1: float
    G_L: float


@dataclass
class DutyDecision:
    duty: float
    candidates: Dict[str, float]
    d_max: float
    clock_duty: float
    peak: Optional[Tuple[float, float]] = None  # (I_ref, I_slope) when a peak limit exists
    signals: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeSpec:
    name: str
    node: Optional[str]  # None means the cell current


class Regulator:
    """Runtime instance of a :class:`ControlGraph` with its own filter states."""

    def __init__(self, graph: ControlGraph, T_s: float):
        if not graph.duty_blocks:
            raise NetlistError("regulator has no duty candidate; add a .reg block")
        self.graph = graph
        self.T_s = T_s
        self.order = topological_blocks(graph)
        self.filters: Dict[str, DiscreteTF] = {}
        self.probes: List[ProbeSpec] = []
        self.d_max = 1.0
        self.softstart: Optional[float] = None
        self.peak: Optional[BlockDecl] = None
        self.pwms: List[BlockDecl] = []
        self.steps: List[BlockDecl] = []
        self.warnings: List[str] = []
        for b in self.order:
            if b.kind == "probe":
                self.probes.append(ProbeSpec(b.name, b.param("node")))
            elif b.kind == "tf":
                self.filters[b.name] = DiscreteTF(*bilinear_discretize(b.param("num"), b.param("den"), T_s))
                self.steps.append(b)
            elif b.kind == "dutymax":
                self.d_max = float(b.param("d"))
            elif b.kind == "softstart":
                self.softstart = float(b.param("duration"))
            elif b.kind == "peaklimit":
                self.peak = b
            elif b.kind == "pwm":
                self.pwms.append(b)
            else:
                self.steps.append(b)
        self.has_dutymax = any(b.kind == "dutymax" for b in graph.blocks)
        self._prog = self._program()
        self._probe_names = [p.name for p in self.probes]
        self._pwm_prog = [(b.name, self._compile(b.inputs[0]), float(b.param("ramp"))) for b in self.pwms]
        if self.peak is not None:
            self._peak_prog = (self._compile(self.peak.inputs[0]), float(self.peak.param("sense")),
                               float(self.peak.param("islope")))

    @property
    def uses_cell_current(self) -> bool:
        return any(p.node is None for p in self.probes)

    def reset(self):
        for f in self.filters.values():
            f.reset()

    @staticmethod
    def _compile(token: str) -> Tuple[float, Optional[str], float]:
        """``(sign, signal name or None, constant)`` for an operand token."""
        if is_number(token):
            return 1.0, None, parse_value(token)
        sign = 1.0
        if token[0] in "+-":
            sign = -1.0 if token[0] == "-" else 1.0
            token = token[1:]
        return sign, token, 0.0

    def _program(self):
        """Per-block evaluation steps as ``(kind, name, operands, params, filter)``."""
        prog = []
        for b in self.steps:
            ops = [self._compile(t) for t in b.inputs]
            if b.kind == "gain":
                extra = (float(b.param("k")),)
            elif b.kind == "limit":
                extra = (float(b.param("lo")), float(b.param("hi")))
            else:
                extra = ()
            prog.append((b.kind, b.name, ops, extra, self.filters.get(b.name)))
        return prog

    @staticmethod
    def _value(op, sig):
        sign, name, const = op
        return const if name is None else sign * sig[name]

    def _signals(self, probes: Dict[str, float], commit: bool) -> Dict[str, float]:
        sig: Dict[str, float] = {name: float(probes[name]) for name in self._probe_names}
        for kind, name, ops, extra, filt in self._prog:
            vals = [const if ref is None else sign * sig[ref] for sign, ref, const in ops]
            if kind == "gain":
                sig[name] = extra[0] * vals[0]
            elif kind == "sum":
                sig[name] = sum(vals)
            elif kind == "mult":
                sig[name] = vals[0] * vals[1]
            elif kind == "limit":
                sig[name] = min(max(vals[0], extra[0]), extra[1])
            elif kind == "tf":
                sig[name] = filt.step(vals[0]) if commit else filt.peek(vals[0])
        return sig

    def softstart_limit(self, t: float) -> float:
        if self.softstart is None:
            return self.d_max
        return self.d_max * min(max(t / self.softstart, 0.0), 1.0)

    def evaluate(self, probes: Dict[str, float], t: float, cell: Optional[PeakContext] = None,
                 commit: bool = False) -> DutyDecision:
        """Duty for the period starting at ``t``.

        ``commit`` advances the discrete filters; call it once per period.
        Without ``cell`` the peak limit is left to the caller, which gets
        ``(I_ref, I_slope)`` in the decision.
        """
        sig = self._signals(probes, commit)
        cands = self._clock_candidates(sig, t)
        clock = min(cands.values()) if cands else 1.0
        clock = min(max(clock, 0.0), self.d_max)
        peak = None
        if self.peak is not None:
            peak = self._peak_reference(sig)
            if cell is not None:
                cands["peaklimit"] = duty_from_peak_limit(peak[0], cell.i_L0, peak[1], cell.G_L,
                                                          cell.v1, self.warnings)
        duty = min(cands.values()) if cands else 1.0
        duty = min(max(duty, 0.0), self.d_max)
        return DutyDecision(duty, cands, self.d_max, clock, peak, sig)

    def duty(self, probes: Dict[str, float], t: float, i_L0: float, v1: float, G_L: float,
             commit: bool = False) -> float:
        """Same duty as :meth:`evaluate` with a peak context, without the bookkeeping."""
        sig = self._signals(probes, commit)
        duty = self.d_max
        for _, (sign, ref, const), ramp in self._pwm_prog:
            d = (const if ref is None else sign * sig[ref]) / ramp
            if d < duty:
                duty = d
        if self.softstart is not None and t < self.softstart:
            duty = min(duty, self.d_max * max(t / self.softstart, 0.0))
        if self.peak is not None:
            (sign, ref, const), sense, I_slope = self._peak_prog
            I_ref = (const if ref is None else sign * sig[ref]) / sense
            d = duty_from_peak_limit(I_ref, i_L0, I_slope, G_L, v1, self.warnings)
            if d < duty:
                duty = d
        return duty if duty > 0.0 else 0.0

    def _clock_candidates(self, sig: Dict[str, float], t: float) -> Dict[str, float]:
        cands: Dict[str, float] = {}
        for name, op, ramp in self._pwm_prog:
            cands[name] = min(max(self._value(op, sig) / ramp, 0.0), 1.0)
        if self.has_dutymax:
            cands["dutymax"] = self.d_max
        if self.softstart is not None:
            cands["softstart"] = self.softstart_limit(t)
        return cands

    def _peak_reference(self, sig: Dict[str, float]) -> Tuple[float, float]:
        op, sense, I_slope = self._peak_prog
        return self._value(op, sig) / sense, I_slope


def eval_duty(regulator: Regulator, probes: Dict[str, float], t: float,
              cell: Optional[PeakContext] = None, commit: bool = False) -> float:
    return regulator.evaluate(probes, t, cell, commit).duty
