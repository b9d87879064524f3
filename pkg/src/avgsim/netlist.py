"""SPICE-like netlist parser for converter + regulator descriptions.

Example::

    * regulated buck
    VIN 1 0 STEP 0:20 100m:40
    XCELL 1 0 2 BUCKCELL L=1m
    COUT 2 0 100u
    RLOAD 2 0 10
    .fs 20k
    .tran 20m PPP=100
    .reg
    probe vo node 2
    sum err 10 -vo
    tf vc err num=20,0.01 den=0,1
    pwm dpwm vc ramp=1
    peaklimit iref=4 islope=0
    dutymax 0.85
    softstart 5m
    .endreg

The result is an immutable :class:`Circuit` plus a :class:`ControlGraph`.
Both compare by value, so ``parse_netlist(to_netlist(c, g)) == (c, g)``.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

GROUND_NAMES = ("0", "gnd")

SUFFIXES = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
    "g": 1e9,
    "t": 1e12,
}

_VALUE_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkgt])?([a-z]*)$"
)

CELL_KINDS = ("BUCKCELL", "BOOSTCELL", "BUCKBOOSTCELL")


class NetlistError(ValueError):
    """Parse or validation failure, located at a line and column when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 text: Optional[str] = None):
        self.message = message
        self.line = line
        self.column = column
        self.text = text
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        msg = where + message
        if text:
            msg += f"\n  >> {text}"
        super().__init__(msg)


def parse_value(token: str) -> float:
    """Parse a number with an optional engineering suffix.

    >>> parse_value('20k')
    20000.0
    >>> parse_value('1.5meg')
    1500000.0
    >>> parse_value('100u')
    0.0001
    """
    m = _VALUE_RE.match(token.strip().lower())
    if not m:
        raise ValueError(f"invalid numeric value {token!r}")
    value = float(m.group(1))
    if m.group(2):
        value *= SUFFIXES[m.group(2)]
    return value


def is_number(token: str) -> bool:
    try:
        parse_value(token)
    except ValueError:
        return False
    return True


# ----------------------------------------------------------------------------
# Circuit IR
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Element:
    name: str
    kind: str  # "R" or "C"
    nodes: Tuple[str, str]
    value: float
    ic: float = 0.0


@dataclass(frozen=True)
class SourceDecl:
    """Independent voltage ("V") or current ("I") source.

    ``kind`` is ``dc``, ``sin`` or ``step``. A ``sin`` source with
    ``rectified`` set produces ``|amplitude * sin(2 pi f t)|``, which stands
    in for an ideal diode bridge.
    """

    name: str
    type: str  # "V" or "I"
    nodes: Tuple[str, str]
    kind: str
    amplitude: float = 0.0
    frequency: float = 0.0
    steps: Tuple[Tuple[float, float], ...] = ()
    rectified: bool = False

    def value(self, t: float) -> float:
        if self.kind == "dc":
            return self.amplitude
        if self.kind == "sin":
            v = self.amplitude * math.sin(2.0 * math.pi * self.frequency * t)
            return abs(v) if self.rectified else v
        value = self.steps[0][1]
        for t_k, v_k in self.steps:
            if t >= t_k:
                value = v_k
            else:
                break
        return value


@dataclass(frozen=True)
class SwitchingCellDecl:
    """Cell A: switch S between ``t1`` and the internal node, diode (or second
    switch) between ``t2`` and the internal node, inductor between the
    internal node and ``common``.

    ``orientation`` is +1 when the inductor current flows out of the cell at
    ``common`` (buck, buck-boost) and -1 when it flows in (boost).
    """

    name: str
    terminals: Tuple[str, str, str]
    kind: str
    L: float
    bidirectional: bool = False
    ic: float = 0.0

    @property
    def orientation(self) -> int:
        return -1 if self.kind == "BOOSTCELL" else 1


@dataclass(frozen=True)
class TransientSpec:
    t_stop: float
    points_per_period: int = 100


@dataclass(frozen=True)
class Circuit:
    nodes: Tuple[str, ...]  # declaration order, ground included
    ground: str
    elements: Tuple[Element, ...]
    sources: Tuple[SourceDecl, ...]
    cell: SwitchingCellDecl
    fs: float
    tran: TransientSpec
    title: str = ""

    @property
    def T_s(self) -> float:
        return 1.0 / self.fs

    @property
    def capacitors(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.kind == "C")

    @property
    def resistors(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.kind == "R")

    def replace(self, **changes) -> "Circuit":
        from dataclasses import replace
        return replace(self, **changes)


def node_index_map(circuit: Circuit) -> Dict[str, int]:
    """Map non-ground nodes to dense row indices in declaration order."""
    index = {}
    for node in circuit.nodes:
        if node != circuit.ground:
            index[node] = len(index)
    return index


# ----------------------------------------------------------------------------
# Control graph IR
# ----------------------------------------------------------------------------

BLOCK_KINDS = ("probe", "gain", "sum", "mult", "limit", "tf", "pwm",
               "peaklimit", "dutymax", "softstart")
DUTY_KINDS = ("pwm", "peaklimit", "dutymax", "softstart")


@dataclass(frozen=True)
class BlockDecl:
    """One regulator statement.

    ``inputs`` hold operand tokens: a signal name or a numeric literal.
    ``params`` is a tuple of ``(key, value)`` pairs, values being floats or
    float tuples (transfer-function coefficients, ascending powers of s).
    """

    kind: str
    name: str
    inputs: Tuple[str, ...] = ()
    params: Tuple[Tuple[str, object], ...] = ()

    def param(self, key: str, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class ControlGraph:
    blocks: Tuple[BlockDecl, ...] = ()

    @property
    def duty_blocks(self) -> Tuple[BlockDecl, ...]:
        return tuple(b for b in self.blocks if b.kind in DUTY_KINDS)

    @property
    def signals(self) -> Tuple[str, ...]:
        return tuple(b.name for b in self.blocks if b.kind not in DUTY_KINDS)


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

@dataclass
class _Tok:
    text: str
    col: int


def _tokens(line: str) -> List[_Tok]:
    return [_Tok(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", line)]


def _strip_comment(line: str) -> str:
    if line.lstrip().startswith("*"):
        return ""
    pos = line.find(";")
    return line if pos < 0 else line[:pos]


class _Parser:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.title = ""
        self.elements: List[Element] = []
        self.sources: List[SourceDecl] = []
        self.cells: List[Tuple[SwitchingCellDecl, int, str]] = []
        self.blocks: List[Tuple[BlockDecl, int, str]] = []
        self.fs: Optional[float] = None
        self.tran: Optional[TransientSpec] = None
        self.names: Dict[str, int] = {}
        self.node_order: List[str] = []
        self.node_uses: Dict[str, List[Tuple[int, str]]] = {}
        self.element_nodes: List[Tuple[str, Sequence[str]]] = []

    # -- helpers ------------------------------------------------------------
    def error(self, msg, lineno, tok: Optional[_Tok] = None):
        raise NetlistError(msg, lineno, tok.col if tok else None, self.lines[lineno - 1].strip())

    def value(self, tok: _Tok, lineno: int) -> float:
        try:
            return parse_value(tok.text)
        except ValueError:
            self.error(f"invalid numeric value '{tok.text}'", lineno, tok)

    def positive(self, tok: _Tok, lineno: int, what: str) -> float:
        v = self.value(tok, lineno)
        if not v > 0:
            self.error(f"{what} must be positive, got {tok.text}", lineno, tok)
        return v

    def keyval(self, tok: _Tok, lineno: int) -> Tuple[str, str]:
        if "=" not in tok.text:
            self.error(f"expected key=value, got '{tok.text}'", lineno, tok)
        key, _, val = tok.text.partition("=")
        return key.lower(), val

    def declare_name(self, name: str, lineno: int, tok: _Tok):
        key = name.lower()
        if key in self.names:
            self.error(f"duplicate name '{name}' (first defined on line {self.names[key]})", lineno, tok)
        self.names[key] = lineno

    def use_node(self, node: str, lineno: int, owner: str):
        node = "0" if node.lower() in GROUND_NAMES else node
        if node not in self.node_uses:
            self.node_order.append(node)
            self.node_uses[node] = []
        self.node_uses[node].append((lineno, owner))
        return node

    def nodes(self, toks: Sequence[_Tok], lineno: int, owner: str) -> Tuple[str, ...]:
        ns = tuple(self.use_node(t.text, lineno, owner) for t in toks)
        self.element_nodes.append((owner, ns))
        return ns

    # -- statements ---------------------------------------------------------
    def run(self):
        in_reg = False
        reg_line = 0
        for lineno, raw in enumerate(self.lines, start=1):
            line = _strip_comment(raw)
            toks = _tokens(line)
            if not toks:
                continue
            head = toks[0].text
            low = head.lower()
            if in_reg:
                if low == ".endreg":
                    in_reg = False
                else:
                    self.reg_statement(toks, lineno)
                continue
            if low.startswith("."):
                if low == ".reg":
                    in_reg, reg_line = True, lineno
                elif low == ".fs":
                    self.expect(toks, 2, lineno, ".fs <value>")
                    self.fs = self.positive(toks[1], lineno, "switching frequency")
                elif low == ".tran":
                    self.tran_statement(toks, lineno)
                elif low == ".nodes":
                    for tok in toks[1:]:
                        node = "0" if tok.text.lower() in GROUND_NAMES else tok.text
                        if node not in self.node_uses:
                            self.node_order.append(node)
                            self.node_uses[node] = []
                elif low == ".title":
                    self.title = line.split(None, 1)[1].strip() if len(toks) > 1 else ""
                elif low == ".end":
                    break
                elif low == ".endreg":
                    self.error(".endreg without .reg", lineno, toks[0])
                else:
                    self.error(f"unknown directive '{head}'", lineno, toks[0])
                continue
            kind = low[0]
            if kind == "r" or kind == "c":
                self.passive(toks, lineno, kind.upper())
            elif kind == "v" or kind == "i":
                self.source(toks, lineno, kind.upper())
            elif kind == "x":
                self.cell(toks, lineno)
            elif kind == "l":
                self.error("external inductors are not supported; the only inductor lives "
                           "inside the switching cell", lineno, toks[0])
            else:
                self.error(f"unknown element kind '{head}'", lineno, toks[0])
        if in_reg:
            raise NetlistError(".reg block not closed with .endreg", reg_line)

    def expect(self, toks, n, lineno, usage):
        if len(toks) < n:
            self.error(f"too few fields, expected '{usage}'", lineno, toks[-1])

    def tran_statement(self, toks, lineno):
        self.expect(toks, 2, lineno, ".tran <t_stop> [PPP=<n>]")
        t_stop = self.positive(toks[1], lineno, "stop time")
        ppp = 100
        for tok in toks[2:]:
            key, val = self.keyval(tok, lineno)
            if key != "ppp":
                self.error(f"unknown .tran option '{key}'", lineno, tok)
            try:
                ppp = int(val)
            except ValueError:
                self.error(f"PPP must be an integer, got '{val}'", lineno, tok)
            if ppp < 2:
                self.error("PPP must be at least 2", lineno, tok)
        self.tran = TransientSpec(t_stop, ppp)

    def passive(self, toks, lineno, kind):
        self.expect(toks, 4, lineno, f"{kind}<name> n+ n- <value>")
        name = toks[0].text
        self.declare_name(name, lineno, toks[0])
        nodes = self.nodes(toks[1:3], lineno, name)
        value = self.positive(toks[3], lineno, f"{name} value")
        ic = 0.0
        for tok in toks[4:]:
            key, val = self.keyval(tok, lineno)
            if key != "ic" or kind != "C":
                self.error(f"unknown option '{tok.text}' for {name}", lineno, tok)
            ic = self.value(_Tok(val, tok.col + 3), lineno)
        self.elements.append(Element(name, kind, nodes, value, ic))

    def source(self, toks, lineno, type_):
        self.expect(toks, 4, lineno, f"{type_}<name> n+ n- DC <val> | SIN <ampl> <freq> | STEP <t0>:<v0> ...")
        name = toks[0].text
        self.declare_name(name, lineno, toks[0])
        nodes = self.nodes(toks[1:3], lineno, name)
        form = toks[3].text.lower()
        args = toks[4:]
        if form == "dc":
            if len(args) != 1:
                self.error("DC source takes exactly one value", lineno, toks[3])
            src = SourceDecl(name, type_, nodes, "dc", amplitude=self.value(args[0], lineno))
        elif form == "sin":
            if len(args) not in (2, 3):
                self.error("SIN source takes <ampl> <freq> [RECT]", lineno, toks[3])
            rect = False
            if len(args) == 3:
                if args[2].text.lower() != "rect":
                    self.error(f"unknown SIN option '{args[2].text}'", lineno, args[2])
                rect = True
            src = SourceDecl(name, type_, nodes, "sin", amplitude=self.value(args[0], lineno),
                             frequency=self.positive(args[1], lineno, "sinusoid frequency"),
                             rectified=rect)
        elif form == "step":
            if not args:
                self.error("STEP source needs at least one <t>:<v> pair", lineno, toks[3])
            steps = []
            for tok in args:
                if tok.text.count(":") != 1:
                    self.error(f"expected <t>:<v>, got '{tok.text}'", lineno, tok)
                t_txt, v_txt = tok.text.split(":")
                t_k = self.value(_Tok(t_txt, tok.col), lineno)
                v_k = self.value(_Tok(v_txt, tok.col + len(t_txt) + 1), lineno)
                if steps and t_k < steps[-1][0]:
                    self.error("step times must be non-decreasing", lineno, tok)
                steps.append((t_k, v_k))
            src = SourceDecl(name, type_, nodes, "step", steps=tuple(steps))
        elif is_number(toks[3].text) and not args:
            src = SourceDecl(name, type_, nodes, "dc", amplitude=self.value(toks[3], lineno))
        else:
            self.error(f"unknown source form '{toks[3].text}'", lineno, toks[3])
        self.sources.append(src)

    def cell(self, toks, lineno):
        usage = "X<name> t1 t2 common BUCKCELL|BOOSTCELL|BUCKBOOSTCELL L=<val> [BIDIR] [IC=<i>]"
        self.expect(toks, 6, lineno, usage)
        name = toks[0].text
        self.declare_name(name, lineno, toks[0])
        kind = toks[4].text.upper()
        if kind not in CELL_KINDS:
            self.error(f"unknown cell type '{toks[4].text}'", lineno, toks[4])
        terms = [t.text for t in toks[1:4]]
        norm = ["0" if t.lower() in GROUND_NAMES else t for t in terms]
        if len(set(norm)) != 3:
            self.error("switching cell terminals must be three distinct nodes", lineno, toks[1])
        nodes = self.nodes(toks[1:4], lineno, name)
        L = None
        bidir = False
        ic = 0.0
        for tok in toks[5:]:
            if tok.text.upper() == "BIDIR":
                bidir = True
                continue
            key, val = self.keyval(tok, lineno)
            vtok = _Tok(val, tok.col + len(key) + 1)
            if key == "l":
                L = self.positive(vtok, lineno, "cell inductance")
            elif key == "ic":
                ic = self.value(vtok, lineno)
            else:
                self.error(f"unknown cell option '{tok.text}'", lineno, tok)
        if L is None:
            self.error("switching cell needs L=<value>", lineno, toks[0])
        if not bidir and ic < 0:
            self.error("unidirectional cell cannot start with negative inductor current", lineno, toks[0])
        self.cells.append((SwitchingCellDecl(name, nodes, kind, L, bidir, ic), lineno, name))

    # -- regulator ----------------------------------------------------------
    def operand(self, tok: _Tok, lineno: int) -> str:
        text = tok.text
        if is_number(text):
            return repr(parse_value(text))
        if not re.match(r"^[A-Za-z_][\w.]*$", text):
            self.error(f"invalid signal name '{text}'", lineno, tok)
        return text.lower()

    def coeffs(self, val: str, tok: _Tok, lineno: int) -> Tuple[float, ...]:
        parts = [p for p in val.split(",") if p]
        if not parts:
            self.error("empty coefficient list", lineno, tok)
        return tuple(self.value(_Tok(p, tok.col), lineno) for p in parts)

    def reg_statement(self, toks, lineno):
        kind = toks[0].text.lower()
        if kind not in BLOCK_KINDS:
            self.error(f"unknown regulator block '{toks[0].text}'", lineno, toks[0])

        def named(n_fields, usage):
            self.expect(toks, n_fields, lineno, usage)
            name = toks[1].text.lower()
            if not re.match(r"^[a-z_][\w.]*$", name):
                self.error(f"invalid signal name '{toks[1].text}'", lineno, toks[1])
            self.declare_name(name, lineno, toks[1])
            return name

        if kind == "probe":
            name = named(3, "probe <name> node <id> | cellcurrent")
            what = toks[2].text.lower()
            if what == "node":
                self.expect(toks, 4, lineno, "probe <name> node <id>")
                node = toks[3].text
                node = "0" if node.lower() in GROUND_NAMES else node
                block = BlockDecl("probe", name, (), (("node", node),))
            elif what == "cellcurrent":
                block = BlockDecl("probe", name, (), (("cellcurrent", 1.0),))
            else:
                self.error(f"unknown probe target '{toks[2].text}'", lineno, toks[2])
        elif kind == "gain":
            name = named(4, "gain <name> <in> <k>")
            block = BlockDecl("gain", name, (self.operand(toks[2], lineno),),
                              (("k", self.value(toks[3], lineno)),))
        elif kind == "sum":
            name = named(4, "sum <name> <in1> <+-in2> ...")
            terms = []
            for tok in toks[2:]:
                text = tok.text
                sign = "+"
                if text[0] in "+-" and not is_number(text):
                    sign, text = text[0], text[1:]
                operand = self.operand(_Tok(text, tok.col), lineno)
                terms.append(sign + operand if not operand.startswith("-") else operand)
            block = BlockDecl("sum", name, tuple(terms))
        elif kind == "mult":
            name = named(4, "mult <name> <in1> <in2>")
            block = BlockDecl("mult", name, tuple(self.operand(t, lineno) for t in toks[2:4]))
        elif kind == "limit":
            name = named(5, "limit <name> <in> <lo> <hi>")
            lo, hi = self.value(toks[3], lineno), self.value(toks[4], lineno)
            if lo > hi:
                self.error("limiter bounds out of order", lineno, toks[3])
            block = BlockDecl("limit", name, (self.operand(toks[2], lineno),), (("lo", lo), ("hi", hi)))
        elif kind == "tf":
            name = named(5, "tf <name> <in> num=<c0,c1,..> den=<c0,c1,..>")
            opts = {}
            for tok in toks[3:]:
                key, val = self.keyval(tok, lineno)
                if key not in ("num", "den"):
                    self.error(f"unknown tf option '{key}'", lineno, tok)
                opts[key] = self.coeffs(val, tok, lineno)
            if "num" not in opts or "den" not in opts:
                self.error("tf needs both num= and den=", lineno, toks[0])
            block = BlockDecl("tf", name, (self.operand(toks[2], lineno),),
                              (("num", opts["num"]), ("den", opts["den"])))
        elif kind == "pwm":
            name = named(4, "pwm <name> <in> ramp=<V>")
            key, val = self.keyval(toks[3], lineno)
            if key != "ramp":
                self.error("pwm needs ramp=<V>", lineno, toks[3])
            ramp = self.positive(_Tok(val, toks[3].col + 5), lineno, "ramp amplitude")
            block = BlockDecl("pwm", name, (self.operand(toks[2], lineno),), (("ramp", ramp),))
        elif kind == "peaklimit":
            opts = {}
            for tok in toks[1:]:
                key, val = self.keyval(tok, lineno)
                if key not in ("iref", "islope", "sense"):
                    self.error(f"unknown peaklimit option '{key}'", lineno, tok)
                opts[key] = (val, tok)
            if "iref" not in opts:
                self.error("peaklimit needs iref=<expr>", lineno, toks[0])
            iref = self.operand(_Tok(opts["iref"][0], opts["iref"][1].col + 5), lineno)
            params = [("islope", self.value(_Tok(*opts["islope"]), lineno) if "islope" in opts else 0.0)]
            if "sense" in opts:
                params.append(("sense", self.positive(_Tok(*opts["sense"]), lineno, "sense gain")))
            else:
                params.append(("sense", 1.0))
            block = BlockDecl("peaklimit", "peaklimit", (iref,), tuple(params))
        elif kind == "dutymax":
            self.expect(toks, 2, lineno, "dutymax <d>")
            d = self.value(toks[1], lineno)
            if not 0 < d <= 1:
                self.error("dutymax must lie in (0, 1]", lineno, toks[1])
            block = BlockDecl("dutymax", "dutymax", (), (("d", d),))
        else:
            self.expect(toks, 2, lineno, "softstart <seconds>")
            block = BlockDecl("softstart", "softstart", (),
                              (("duration", self.positive(toks[1], lineno, "soft-start duration")),))
        self.blocks.append((block, lineno, self.lines[lineno - 1].strip()))

    # -- validation ---------------------------------------------------------
    def build(self) -> Tuple[Circuit, ControlGraph]:
        if not self.cells:
            raise NetlistError("no switching cell declared")
        if len(self.cells) > 1:
            _, lineno, _ = self.cells[1]
            raise NetlistError("only one switching cell is allowed", lineno)
        if not self.node_uses.get("0"):
            raise NetlistError("missing ground node '0'")
        if self.fs is None:
            raise NetlistError("missing .fs directive")
        if self.tran is None:
            raise NetlistError("missing .tran directive")
        if self.tran.t_stop < 1.0 / self.fs:
            raise NetlistError(".tran stop time shorter than one switching period")
        for node, uses in self.node_uses.items():
            if node != "0" and not uses:
                raise NetlistError(f"node '{node}' is declared but never connected")
            if node != "0" and len(uses) < 2:
                lineno, owner = uses[0]
                raise NetlistError(f"node '{node}' is dangling (only connected to {owner})",
                                   lineno, None, self.lines[lineno - 1].strip())
        self.check_connected()
        for src in self.sources:
            if src.kind == "sin" and src.frequency > self.fs / 20:
                warnings.warn(f"source {src.name}: f0 = {src.frequency:g} Hz is not much lower "
                              f"than fs = {self.fs:g} Hz; averaging is inaccurate", stacklevel=3)
        graph = self.build_graph()
        circuit = Circuit(
            nodes=tuple(self.node_order),
            ground="0",
            elements=tuple(self.elements),
            sources=tuple(self.sources),
            cell=self.cells[0][0],
            fs=self.fs,
            tran=self.tran,
            title=self.title,
        )
        return circuit, graph

    def check_connected(self):
        parent = {n: n for n in self.node_order}

        def find(n):
            while parent[n] != n:
                parent[n] = parent[parent[n]]
                n = parent[n]
            return n

        for _, ns in self.element_nodes:
            for other in ns[1:]:
                parent[find(other)] = find(ns[0])
        roots = {find(n) for n in self.node_order}
        if len(roots) > 1:
            island = sorted(n for n in self.node_order if find(n) != find("0"))
            raise NetlistError(f"circuit is not connected; nodes {', '.join(island)} "
                               "have no path to ground")

    def build_graph(self) -> ControlGraph:
        blocks = [b for b, _, _ in self.blocks]
        if not blocks:
            # a bare circuit is valid IR; simulating it needs a regulator
            return ControlGraph()
        if not any(b.kind in DUTY_KINDS for b in blocks):
            raise NetlistError("regulator has no duty candidate (pwm, peaklimit, dutymax or softstart)")
        seen_single = set()
        signals = {b.name for b in blocks if b.kind not in DUTY_KINDS}
        for b, lineno, text in self.blocks:
            if b.kind in ("peaklimit", "dutymax", "softstart"):
                if b.kind in seen_single:
                    raise NetlistError(f"duplicate {b.kind} statement", lineno, None, text)
                seen_single.add(b.kind)
            if b.kind == "probe" and b.param("node") is not None:
                node = b.param("node")
                if node not in self.node_uses:
                    raise NetlistError(f"probe {b.name} references unknown node '{node}'",
                                       lineno, None, text)
            for operand in b.inputs:
                ref = operand.lstrip("+-")
                if not is_number(ref) and ref not in signals:
                    raise NetlistError(f"{b.kind} {b.name} references undefined signal '{ref}'",
                                       lineno, None, text)
            if b.kind == "tf":
                num, den = b.param("num"), b.param("den")
                if _degree(num) > _degree(den):
                    raise NetlistError(f"tf {b.name} is improper (numerator degree exceeds "
                                       "denominator degree)", lineno, None, text)
                if _degree(den) < 0:
                    raise NetlistError(f"tf {b.name} has a zero denominator", lineno, None, text)
        _topological_order(blocks)
        return ControlGraph(tuple(blocks))


def _degree(coeffs: Sequence[float]) -> int:
    deg = -1
    for i, c in enumerate(coeffs):
        if c != 0:
            deg = i
    return deg


def _topological_order(blocks: Sequence[BlockDecl]) -> List[BlockDecl]:
    """Order blocks so every signal is computed before it is read."""
    by_name = {b.name: b for b in blocks if b.kind not in DUTY_KINDS}
    order: List[BlockDecl] = []
    state: Dict[str, int] = {}

    def visit(b: BlockDecl, path):
        mark = state.get(b.name)
        if mark == 2:
            return
        if mark == 1:
            raise NetlistError("algebraic loop in regulator: " + " -> ".join(path + [b.name]))
        state[b.name] = 1
        for operand in b.inputs:
            ref = operand.lstrip("+-")
            if ref in by_name:
                visit(by_name[ref], path + [b.name])
        state[b.name] = 2
        order.append(b)

    for b in blocks:
        if b.kind not in DUTY_KINDS:
            visit(b, [])
    return order + [b for b in blocks if b.kind in DUTY_KINDS]


def topological_blocks(graph: ControlGraph) -> List[BlockDecl]:
    return _topological_order(graph.blocks)


def parse_netlist(text: str) -> Tuple[Circuit, ControlGraph]:
    """Parse netlist text into a validated ``(Circuit, ControlGraph)``.

    Raises :class:`NetlistError` carrying the line (and column when it can
    be pinned to a token) of the first problem found.
    """
    parser = _Parser(text)
    parser.run()
    return parser.build()


def load_netlist(path) -> Tuple[Circuit, ControlGraph]:
    with open(path, encoding="utf-8") as fh:
        return parse_netlist(fh.read())


# ----------------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------------

def _num(x: float) -> str:
    return repr(float(x))


def _source_line(s: SourceDecl) -> str:
    head = f"{s.name} {s.nodes[0]} {s.nodes[1]}"
    if s.kind == "dc":
        return f"{head} DC {_num(s.amplitude)}"
    if s.kind == "sin":
        return f"{head} SIN {_num(s.amplitude)} {_num(s.frequency)}" + (" RECT" if s.rectified else "")
    return head + " STEP " + " ".join(f"{_num(t)}:{_num(v)}" for t, v in s.steps)


def _block_line(b: BlockDecl) -> str:
    k = b.kind
    if k == "probe":
        node = b.param("node")
        return f"probe {b.name} node {node}" if node is not None else f"probe {b.name} cellcurrent"
    if k == "gain":
        return f"gain {b.name} {b.inputs[0]} {_num(b.param('k'))}"
    if k == "sum":
        return f"sum {b.name} " + " ".join(b.inputs)
    if k == "mult":
        return f"mult {b.name} {b.inputs[0]} {b.inputs[1]}"
    if k == "limit":
        return f"limit {b.name} {b.inputs[0]} {_num(b.param('lo'))} {_num(b.param('hi'))}"
    if k == "tf":
        num = ",".join(_num(c) for c in b.param("num"))
        den = ",".join(_num(c) for c in b.param("den"))
        return f"tf {b.name} {b.inputs[0]} num={num} den={den}"
    if k == "pwm":
        return f"pwm {b.name} {b.inputs[0]} ramp={_num(b.param('ramp'))}"
    if k == "peaklimit":
        return (f"peaklimit iref={b.inputs[0]} islope={_num(b.param('islope'))} "
                f"sense={_num(b.param('sense'))}")
    if k == "dutymax":
        return f"dutymax {_num(b.param('d'))}"
    return f"softstart {_num(b.param('duration'))}"


def to_netlist(circuit: Circuit, graph: ControlGraph) -> str:
    """Serialize back to netlist text that re-parses to an identical IR.

    Node order is pinned with a leading ``.nodes`` declaration.
    """
    lines = []
    if circuit.title:
        lines.append(f".title {circuit.title}")
    items = []
    for e in circuit.elements:
        line = f"{e.name} {e.nodes[0]} {e.nodes[1]} {_num(e.value)}"
        if e.kind == "C":
            line += f" IC={_num(e.ic)}"
        items.append((e.nodes, line))
    for s in circuit.sources:
        items.append((s.nodes, _source_line(s)))
    c = circuit.cell
    cell_line = f"{c.name} {' '.join(c.terminals)} {c.kind} L={_num(c.L)}"
    if c.bidirectional:
        cell_line += " BIDIR"
    cell_line += f" IC={_num(c.ic)}"
    items.append((c.terminals, cell_line))
    lines.append(".nodes " + " ".join(circuit.nodes))
    lines.extend(line for _, line in items)
    lines.append(f".fs {_num(circuit.fs)}")
    lines.append(f".tran {_num(circuit.tran.t_stop)} PPP={circuit.tran.points_per_period}")
    if graph.blocks:
        lines.append(".reg")
        lines.extend(_block_line(b) for b in graph.blocks)
        lines.append(".endreg")
    return "\n".join(lines) + "\n"
