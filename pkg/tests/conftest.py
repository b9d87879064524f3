from pathlib import Path

import pytest

from avgsim.netlist import load_netlist, parse_netlist

NETLISTS = Path(__file__).resolve().parents[1] / "src" / "avgsim" / "netlists"


def netlist_path(name: str) -> Path:
    return NETLISTS / name


@pytest.fixture
def load():
    """Load a shipped netlist by file name."""
    return lambda name: load_netlist(netlist_path(name))


def rc_netlist(r=1e3, c=1e-6, vin=10.0, t_stop=5e-3, fs=20e3, ppp=100) -> str:
    # the cell is parked at d = 0, so only the RC network is active
    return f"""\
VIN in 0 DC {vin!r}
R1 in out {r!r}
C1 out 0 {c!r}
XCELL in 0 out BUCKCELL L=1m
.fs {fs!r}
.tran {t_stop!r} PPP={ppp}
.reg
pwm dpwm 0 ramp=1
.endreg
"""


def buck_netlist(vin=20.0, r=10.0, d=0.5, t_stop=40e-3, L="1m", C="100u", extra="") -> str:
    """Open-loop buck with a fixed duty."""
    return f"""\
VIN in 0 DC {vin!r}
XCELL in 0 out BUCKCELL L={L} {extra}
COUT out 0 {C}
RLOAD out 0 {r!r}
.fs 20k
.tran {t_stop!r}
.reg
pwm dpwm {d!r} ramp=1
.endreg
"""


@pytest.fixture
def parse():
    return parse_netlist


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for an acceptance criterion.

    Call ``criterion(name, ok, detail)`` before asserting. A test that
    raises before reporting is recorded as a failure.
    """
    entries = []

    def report(name: str, ok: bool, detail: str = ""):
        entries.append((name, bool(ok), detail))
        _CRITERIA.append((name, bool(ok), detail))

    yield report
    if not entries:
        _CRITERIA.append((request.node.name, False, "did not complete"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
