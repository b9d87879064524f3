"""Piecewise-linear reference simulator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from avgsim.exact import (
    EVENT_RTOL,
    IDLE,
    OFF,
    ON,
    ExactSimulator,
    Guard,
    Propagator,
    build_state_space,
    compare_traces,
    expm_reference,
    find_switch_instant,
    propagate,
    run_exact,
)
from avgsim.netlist import TransientSpec, parse_netlist
from avgsim.ripple import Waveform
from conftest import buck_netlist, rc_netlist

L, C, R = 1e-3, 100e-6, 10.0


def buck_system(topology):
    circuit, _ = parse_netlist(buck_netlist())
    return build_state_space(circuit, topology)


# -- state space -------------------------------------------------------------

def test_rc_row_is_first_order_lag():
    circuit, _ = parse_netlist(rc_netlist(r=2e3, c=3e-6))
    sysm = build_state_space(circuit, IDLE)
    k = sysm.state_labels.index("VC(C1)")
    assert sysm.A[k, k] == pytest.approx(-1 / (2e3 * 3e-6), rel=1e-12)
    assert sysm.B[k, sysm.input_labels.index("VIN")] == pytest.approx(1 / (2e3 * 3e-6), rel=1e-12)


def test_buck_on_state():
    sysm = buck_system(ON)
    assert sysm.state_labels == ["i_L", "VC(COUT)"]
    np.testing.assert_allclose(sysm.A, [[0, -1 / L], [1 / C, -1 / (R * C)]], rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(sysm.B, [[1 / L], [0]], rtol=1e-12, atol=1e-9)


def test_buck_off_state_decouples_input():
    on, off = buck_system(ON), buck_system(OFF)
    np.testing.assert_allclose(off.A, on.A, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(off.B, 0.0, atol=1e-9)


def test_idle_state_freezes_inductor():
    sysm = buck_system(IDLE)
    np.testing.assert_array_equal(sysm.A[0], 0.0)
    assert sysm.A[1, 1] == pytest.approx(-1 / (R * C))


def test_outputs_are_node_voltages():
    sysm = buck_system(ON)
    assert sysm.output_labels == ["V(in)", "V(out)"]
    y = sysm.C @ np.array([1.5, 7.0]) + sysm.D @ np.array([20.0])
    np.testing.assert_allclose(y, [20.0, 7.0], atol=1e-12)


# -- propagation --------------------------------------------------------------

def test_integrator_limit():
    prop = Propagator(np.zeros((2, 2)))
    x = prop.at([1.0, -2.0], [3.0, 0.5], [0.2])[0]
    np.testing.assert_allclose(x, [1.6, -1.9], rtol=1e-15)


def test_scalar_decay():
    tau = 2e-3
    prop = Propagator(np.array([[-1 / tau]]))
    x = prop.at([5.0], [0.0], [3e-3])[0, 0]
    assert x == pytest.approx(5.0 * math.exp(-1.5), rel=1e-14)


def rk4(A, w, x0, t, steps):
    """``steps`` classical RK4 steps. For a linear system one step is the
    affine map ``x -> P x + q``; the map is applied ``steps`` times by
    repeated squaring of its augmented matrix."""
    n = len(x0)
    h = t / steps
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = w
    hM = h * M
    step = np.eye(n + 1) + hM + hM @ hM / 2 + hM @ hM @ hM / 6 + hM @ hM @ hM @ hM / 24
    total = np.linalg.matrix_power(step, steps)
    return (total @ np.append(x0, 1.0))[:n]


def test_buck_on_interval_matches_fine_rk4():
    sysm = buck_system(ON)
    dt = 0.5 * 50e-6
    x = propagate(sysm, [0.0, 0.0], [20.0], dt)
    ref = rk4(sysm.A, sysm.B @ [20.0], np.zeros(2), dt, 10 ** 6)
    np.testing.assert_allclose(x, ref, rtol=1e-7)


def test_long_interval_matches_fine_rk4():
    sysm = buck_system(ON)
    x = propagate(sysm, [0.3, 2.0], [20.0], 5e-3)
    ref = rk4(sysm.A, sysm.B @ [20.0], np.array([0.3, 2.0]), 5e-3, 10 ** 6)
    np.testing.assert_allclose(x, ref, rtol=1e-7)


def exp_from_propagator(prop, t):
    n = prop.n
    return np.column_stack([prop.at(e, np.zeros(n), [t])[0] for e in np.eye(n)])


@pytest.mark.parametrize("topology", [ON, OFF, IDLE])
@pytest.mark.parametrize("t", [1e-6, 50e-6, 1e-3])
def test_eigen_exponential_matches_reference(topology, t):
    sysm = buck_system(topology)
    prop = Propagator(sysm.A)
    E = exp_from_propagator(prop, t)
    ref = expm_reference(sysm.A, t)
    assert np.linalg.norm(E - ref) <= 1e-9 * np.linalg.norm(ref)


def test_defective_matrix_falls_back():
    A = np.array([[-1.0, 1.0], [0.0, -1.0]])
    prop = Propagator(A)
    assert not prop.use_eig
    x = prop.at([1.0, 1.0], [0.5, 0.0], [0.7])[0]
    # closed form of the Jordan block with constant forcing
    t = 0.7
    x2 = math.exp(-t)
    x1 = math.exp(-t) * (1 + t) + 0.5 * (1 - math.exp(-t))
    np.testing.assert_allclose(x, [x1, x2], rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2e-3), st.floats(0, 2e-3),
       st.tuples(st.floats(-5, 5), st.floats(-50, 50)), st.sampled_from([ON, OFF, IDLE]))
def test_semigroup(t1, t2, x0, topology):
    sysm = buck_system(topology)
    prop = Propagator(sysm.A)
    w = sysm.B @ [20.0]
    direct = prop.at(x0, w, [t1 + t2])[0]
    chained = prop.at(prop.at(x0, w, [t1])[0], w, [t2])[0]
    scale = 1 + np.abs(direct).max()
    np.testing.assert_allclose(chained, direct, rtol=0, atol=1e-9 * scale)


# -- event location ---------------------------------------------------------------

def test_linear_ramp_crossing():
    V, L_, I_ref = 20.0, 1e-3, 4.0
    prop = Propagator(np.zeros((1, 1)))
    ev = find_switch_instant(prop, [0.0], [V / L_], Guard(np.array([1.0]), 0.0, -I_ref, I_ref),
                             (0.0, 1e-3), "comparator-crossing", rising=True)
    assert ev.t == pytest.approx(I_ref * L_ / V, rel=1e-14)
    assert ev.iterations <= 1
    assert ev.kind == "comparator-crossing"


def test_no_crossing_is_no_event():
    prop = Propagator(np.zeros((1, 1)))
    guard = Guard(np.array([1.0]), 0.0, -100.0, 100.0)
    assert find_switch_instant(prop, [0.0], [1.0], guard, (0.0, 1.0)) is None
    assert find_switch_instant(prop, [0.0], [1.0], guard, (1.0, 1.0)) is None


@pytest.mark.parametrize("x0, th", [(5.0, 1.0), (3.0, 2.9), (1.0, 1e-3)])
def test_exponential_threshold(x0, th):
    tau = 1e-3
    prop = Propagator(np.array([[-1 / tau]]))
    expected = tau * math.log(x0 / th)
    ev = find_switch_instant(prop, [x0], [0.0], Guard(np.array([1.0]), 0.0, -th, th),
                             (0.0, 2 * expected + 1e-3), rising=False)
    assert ev.t == pytest.approx(expected, rel=1e-10)
    assert abs(ev.residual) <= EVENT_RTOL * th


# -- full runs -------------------------------------------------------------------

def test_unregulated_buck_converts_half():
    trace, _ = run_exact(*parse_netlist(buck_netlist(d=0.5, t_stop=40e-3)), ppp=200,
                         keep_waveforms=False)
    vout = trace.signals["VC(COUT)"][-40:]
    assert np.mean(vout) == pytest.approx(10.0, rel=1e-3)
    assert set(trace.mode[-40:]) == {"CCM"}


@pytest.fixture(scope="module")
def dcm_run():
    sim = ExactSimulator(*parse_netlist(buck_netlist(r=200.0, t_stop=20e-3)), ppp=200)
    trace, waves = sim.run()
    return sim, trace, waves


def test_dcm_buck_idles_every_period(dcm_run):
    sim, trace, waves = dcm_run
    tail = slice(-100, None)
    assert set(trace.mode[tail]) == {"DCM"}
    assert np.all(trace.signals["d"][tail] + trace.signals["d2"][tail] < 1.0)
    crossings = [e for e in sim.events if e.kind == "diode-zero-crossing"]
    assert len(crossings) >= 100  # start-up periods run in CCM
    assert waves["i_L"].values.min() >= -1e-9


def test_event_residuals_small(dcm_run):
    sim, trace, _ = dcm_run
    scale = max(1.0, float(np.max(trace.signals["i_L1"])))
    assert sim.events
    assert all(abs(e.residual) <= EVENT_RTOL * scale for e in sim.events)


def test_state_continuous_across_switching():
    sim = ExactSimulator(*parse_netlist(buck_netlist(r=200.0)))
    x = sim.initial_state()
    top, peak = OFF, x[0]
    joints = 0
    for n in range(60):
        segs, x_end, u, w, top, peak, _ = sim.period(n, x, top, peak)
        ends = [sim.props[s.topology].at(s.x0, w[s.topology], [s.end - s.start])[0] for s in segs]
        for before, seg in zip(ends[:-1], segs[1:]):
            # capacitor voltages carry over exactly, the inductor current to
            # within the event tolerance
            np.testing.assert_allclose(seg.x0[1:], before[1:], rtol=1e-12, atol=1e-12)
            assert abs(seg.x0[0] - before[0]) <= 1e-9
            joints += 1
        np.testing.assert_allclose(x_end, ends[-1], rtol=1e-12, atol=1e-12)
        x = x_end
    assert joints > 60


def test_energy_balance_on_interval():
    sysm = buck_system(ON)
    prop = Propagator(sysm.A)
    Vin = 20.0
    w = sysm.B @ [Vin]
    x0 = np.array([0.4, 6.0])
    t_end = 40e-6

    def energy(x):
        return 0.5 * L * x[0] ** 2 + 0.5 * C * x[1] ** 2

    def power(t):
        x = prop.at(x0, w, [t])[0]
        return Vin * x[0] - x[1] ** 2 / R

    gained = energy(prop.at(x0, w, [t_end])[0]) - energy(x0)
    supplied = quad(power, 0.0, t_end, epsabs=0, epsrel=1e-12)[0]
    assert gained == pytest.approx(supplied, rel=1e-6)


def test_rc_matches_closed_form():
    trace, waves = run_exact(*parse_netlist(rc_netlist()))
    w = waves["VC(C1)"]
    expected = 10.0 * (1 - np.exp(-w.t / 1e-3))
    np.testing.assert_allclose(w.values, expected, rtol=0, atol=1e-9)
    assert len(w) == trace.periods * 1000 + 1
    np.testing.assert_allclose(waves["V(out)"].values, expected, rtol=0, atol=1e-9)


def test_shorter_spec_overrides_netlist():
    circuit, graph = parse_netlist(rc_netlist())
    trace, waves = run_exact(circuit, graph, TransientSpec(1e-3), ppp=10)
    assert trace.periods == 20
    assert len(waves["i_L"]) == 201


# -- comparison ----------------------------------------------------------------------

def wave(values, t_end=1.0):
    values = np.asarray(values, dtype=float)
    return Waveform("v", np.linspace(0, t_end, len(values)), values, 10)


def test_self_comparison_is_zero():
    w = {"v": wave(np.sin(np.linspace(0, 6, 101)) + 3.0)}
    rep = compare_traces(w, w)
    assert rep.signals["v"].max_abs == 0.0
    assert rep.worst.normalized == 0.0


def test_constant_offset():
    base = np.full(101, 4.0)
    eps = 0.02
    rep = compare_traces({"v": wave(base + eps)}, {"v": wave(base)})
    assert rep.signals["v"].normalized == pytest.approx(eps / 4.0, rel=1e-12)
    assert rep.signals["v"].scale == 4.0


def test_worst_time_and_start_cut():
    exact = np.zeros(101) + 1.0
    avg = exact.copy()
    avg[10] += 0.5
    avg[70] += 0.1
    rep = compare_traces({"v": wave(avg)}, {"v": wave(exact)})
    assert rep.signals["v"].t_worst == pytest.approx(0.1)
    rep = compare_traces({"v": wave(avg)}, {"v": wave(exact)}, t_from=0.5)
    assert rep.signals["v"].max_abs == pytest.approx(0.1)
    assert rep.signals["v"].t_worst == pytest.approx(0.7)


def test_horizon_mismatch_rejected():
    with pytest.raises(ValueError, match="horizon"):
        compare_traces({"v": wave(np.ones(11), 2.0)}, {"v": wave(np.ones(11), 1.0)})
