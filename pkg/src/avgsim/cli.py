"""Command-line frontend: ``avgsim run`` and ``avgsim bench``."""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exact import DEFAULT_PPP, ExactSimulator, compare_traces
from .netlist import Circuit, ControlGraph, NetlistError, TransientSpec, load_netlist, parse_value
from .pece import AveragedSimulator, SimulationError, Trace
from .ripple import Waveform, reconstruct_all
from .solver import SingularCircuitError

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SIM = 3

ENGINES = ("avg", "exact")


@dataclass
class RunReport:
    engine: str                       # "averaged" or "exact"
    periods: int
    solves: int
    wall_time: float                  # stepping loop only, seconds
    outputs: Dict[str, Path] = field(default_factory=dict)


@dataclass
class EngineResult:
    trace: Trace
    waves: Dict[str, Waveform]
    solves: int
    wall_time: float


# ----------------------------------------------------------------------------
# Engines
# ----------------------------------------------------------------------------

def _exact_ppp(out_ppp: int) -> int:
    """Oracle sampling density: at least the reference 1000 points per period
    and a multiple of the output density."""
    return out_ppp * max(1, math.ceil(DEFAULT_PPP / out_ppp))


def _decimate(waves: Dict[str, Waveform], step: int, ppp: int) -> Dict[str, Waveform]:
    if step == 1:
        return waves
    return {k: Waveform(w.name, w.t[::step], w.values[::step], ppp) for k, w in waves.items()}


def simulate(circuit: Circuit, graph: ControlGraph, engine: str, ppp: int,
             spec: Optional[TransientSpec] = None, waveforms: bool = True) -> EngineResult:
    """Run one engine. Timing covers simulator setup and the stepping loop,
    not parsing, ripple reconstruction or output."""
    if engine == "avg":
        t0 = time.perf_counter()
        sim = AveragedSimulator(circuit, graph)
        trace = sim.run(spec)
        wall = time.perf_counter() - t0
        waves = reconstruct_all(trace, ppp) if waveforms else {}
        return EngineResult(trace, waves, sim.solves, wall)
    if engine == "exact":
        inner = _exact_ppp(ppp)
        t0 = time.perf_counter()
        trace, waves = ExactSimulator(circuit, graph, inner).run(spec, keep_waveforms=waveforms)
        wall = time.perf_counter() - t0
        if waveforms:
            waves = _decimate({k: w for k, w in waves.items() if not k.startswith("V(")},
                              inner // ppp, ppp)
        return EngineResult(trace, waves, 0, wall)
    raise ValueError(f"unknown engine '{engine}'")


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------

def _unit(name: str) -> str:
    if name == "t":
        return "s"
    if name.startswith(("V(", "VC(")):
        return "V"
    if name.startswith("i_"):
        return "A"
    return "-"


def _fmt(v) -> str:
    return repr(float(v))


def trace_columns(trace: Trace) -> List[str]:
    sig = trace.signals
    cols = [k for k in sig if k.startswith("V(")] + [k for k in sig if k.startswith("VC(")]
    cols += [k for k in ("i_L0", "i_L1", "i_L_avg", "d", "d2") if k in sig]
    return cols


def write_trace_csv(path: Path, trace: Trace):
    cols = trace_columns(trace)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + cols + ["mode"])
        fh.write("# units: " + ",".join(_unit(c) for c in ["t"] + cols) + ",-\n")
        data = [trace.signals[c] for c in cols]
        for n in range(trace.periods):
            w.writerow([_fmt(trace.t[n])] + [_fmt(col[n]) for col in data] + [trace.mode[n]])


def write_waves_csv(path: Path, waves: Dict[str, Waveform]):
    names = list(waves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + names)
        fh.write("# units: " + ",".join(_unit(c) for c in ["t"] + names) + "\n")
        if not names:
            return
        t = waves[names[0]].t
        cols = [waves[k].values for k in names]
        for j in range(len(t)):
            w.writerow([_fmt(t[j])] + [_fmt(c[j]) for c in cols])


def read_csv(path) -> Dict[str, np.ndarray]:
    """Numeric columns of a CSV written by this module (the ``mode`` column
    comes back as a list of strings)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    out: Dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        col = [r[j] for r in body]
        out[name] = col if name == "mode" else np.array(col, dtype=float)
    return out


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def _spec(circuit: Circuit, t_stop: Optional[float]) -> TransientSpec:
    if t_stop is None:
        return circuit.tran
    return TransientSpec(t_stop, circuit.tran.points_per_period)


def cmd_run(netlist, engine: str = "avg", out_dir=".", ppp: Optional[int] = None,
            t_stop: Optional[float] = None) -> RunReport:
    """Simulate a netlist and write ``trace.csv`` and ``waves.csv``.

    Raises :class:`NetlistError` before anything is written if the netlist
    is invalid, and :class:`SimulationError` if stepping fails.
    """
    circuit, graph = load_netlist(netlist)
    ppp = ppp or circuit.tran.points_per_period
    result = simulate(circuit, graph, engine, ppp, _spec(circuit, t_stop))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "waves": out / "waves.csv"}
    write_trace_csv(paths["trace"], result.trace)
    write_waves_csv(paths["waves"], result.waves)
    name = "averaged" if engine == "avg" else "exact"
    return RunReport(name, result.trace.periods, result.solves, result.wall_time, paths)


@dataclass
class BenchReport:
    engines: Sequence[str]
    times: Dict[str, List[float]]
    medians: Dict[str, float]
    speedup: float
    periods: int
    errors: Dict[str, dict]
    outputs: Dict[str, Path] = field(default_factory=dict)

    @property
    def labels(self) -> List[str]:
        return _labels(self.engines)

    def text(self) -> str:
        a, b = self.labels
        lines = [f"{'engine':<10}{'median [s]':>14}{'runs':>6}"]
        for e in self.labels:
            lines.append(f"{e:<10}{self.medians[e]:>14.6f}{len(self.times[e]):>6}")
        lines.append(f"speedup ({b} / {a}): {self.speedup:.2f}x over {self.periods} periods")
        lines.append(f"{'signal':<12}{'max abs':>14}{'scale':>12}{'normalized':>12}{'t worst [s]':>14}")
        for name, e in self.errors.items():
            lines.append(f"{name:<12}{e['max_abs']:>14.6g}{e['scale']:>12.6g}"
                         f"{e['normalized']:>12.4%}{e['t_worst']:>14.6g}")
        return "\n".join(lines)


def _labels(engines: Sequence[str]) -> List[str]:
    """Result keys; a repeated engine gets a positional suffix."""
    if engines[0] == engines[1]:
        return [f"{e}#{k + 1}" for k, e in enumerate(engines)]
    return list(engines)


def cmd_bench(netlist, reps: int = 3, out_dir: Optional[str] = None,
              engines: Sequence[str] = ("avg", "exact"), ppp: Optional[int] = None,
              t_stop: Optional[float] = None, t_from: float = 0.0) -> BenchReport:
    """Time both engines ``reps`` times (sequentially) and compare waveforms."""
    if len(engines) != 2 or any(e not in ENGINES for e in engines):
        raise ValueError(f"engines must be two of {ENGINES}")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    circuit, graph = load_netlist(netlist)
    ppp = ppp or circuit.tran.points_per_period
    spec = _spec(circuit, t_stop)
    keys = _labels(engines)
    times: Dict[str, List[float]] = {k: [] for k in keys}
    for _ in range(reps):
        for k, e in zip(keys, engines):
            times[k].append(simulate(circuit, graph, e, ppp, spec, waveforms=False).wall_time)
    medians = {k: statistics.median(v) for k, v in times.items()}
    a, b = engines
    ka, kb = keys
    ra = simulate(circuit, graph, a, ppp, spec)
    rb = simulate(circuit, graph, b, ppp, spec)
    rep = compare_traces(ra.waves, rb.waves, t_from, avg_trace=ra.trace, exact_trace=rb.trace)
    errors = {k: {"max_abs": v.max_abs, "scale": v.scale, "normalized": v.normalized,
                  "t_worst": v.t_worst} for k, v in rep.signals.items()}
    speedup = medians[kb] / medians[ka] if medians[ka] > 0 else float("inf")
    report = BenchReport(tuple(engines), times, medians, speedup, ra.trace.periods, errors)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "bench.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "name", "value"])
            for k in keys:
                w.writerow(["median_time_s", k, _fmt(medians[k])])
            w.writerow(["speedup", f"{kb}/{ka}", _fmt(speedup)])
            for name, e in errors.items():
                for key in ("max_abs", "scale", "normalized", "t_worst"):
                    w.writerow([key, name, _fmt(e[key])])
        report.outputs["bench"] = path
        (out / "bench.txt").write_text(report.text() + "\n")
        report.outputs["text"] = out / "bench.txt"
    return report


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avgsim", description="Averaged switching-converter simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate a netlist and write CSV output")
    r.add_argument("netlist")
    r.add_argument("--engine", choices=ENGINES, default="avg")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--ppp", type=int, default=None, help="waveform points per period")
    r.add_argument("--tstop", type=parse_value, default=None,
                   help="override the .tran stop time [s], suffixes allowed")
    b = sub.add_parser("bench", help="time both engines and compare their waveforms")
    b.add_argument("netlist")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--out", default=None, help="directory for bench.csv and bench.txt")
    b.add_argument("--ppp", type=int, default=None)
    b.add_argument("--tstop", type=parse_value, default=None)
    b.add_argument("--from", dest="t_from", type=parse_value, default=0.0,
                   help="ignore deviations before this time [s]")
    b.add_argument("--engines", nargs=2, choices=ENGINES, default=["avg", "exact"],
                   metavar=("BASE", "REFERENCE"),
                   help="engine pair; the same engine twice is a self-check")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            rep = cmd_run(args.netlist, args.engine, args.out, args.ppp, args.tstop)
            print(f"{rep.engine}: {rep.periods} periods, {rep.solves} solves, "
                  f"{rep.wall_time:.4f} s; wrote {rep.outputs['trace']} and {rep.outputs['waves']}")
        else:
            rep = cmd_bench(args.netlist, args.reps, args.out, args.engines, args.ppp,
                            args.tstop, args.t_from)
            print(rep.text())
    except NetlistError as exc:
        print(f"avgsim: {args.netlist}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"avgsim: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValueError as exc:  # inconsistent options, e.g. a stop time below one period
        print(f"avgsim: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SimulationError, SingularCircuitError, RuntimeError) as exc:
        print(f"avgsim: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
