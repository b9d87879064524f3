"""Discrete regulator: bilinear filters, duty candidates, minimum rule."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import signal

from avgsim.netlist import NetlistError, parse_netlist
from avgsim.regulator import (
    DiscreteTF,
    PeakContext,
    Regulator,
    bilinear_discretize,
    dtf_step,
    duty_from_peak_limit,
    eval_duty,
)

T_S = 50e-6
F0 = 50.0


def regulator(*statements, T_s=T_S):
    text = "VIN in 0 DC 20\nXCELL in 0 out BUCKCELL L=1m\nCOUT out 0 100u\nRLOAD out 0 10\n"
    text += ".fs 20k\n.tran 1m\n.reg\n" + "\n".join(statements) + "\n.endreg\n"
    return Regulator(parse_netlist(text)[1], T_s)


def second_order_lowpass():
    w = 2 * math.pi * F0
    return [1.0], [1.0, 2.0 / w, 1.0 / w ** 2]  # (1 + s/w)^2, ascending powers


def test_identity_transfer_function():
    b, a = bilinear_discretize([1.0], [1.0], T_S)
    np.testing.assert_array_equal(b, [1.0])
    np.testing.assert_array_equal(a, [1.0])


def test_lowpass_unity_dc_gain():
    b, a = bilinear_discretize(*second_order_lowpass(), T_S)
    assert a[0] == 1.0
    assert b.sum() / a.sum() == pytest.approx(1.0, rel=1e-9)


def test_lowpass_pole_mapping():
    mpmath.mp.dps = 40
    sp = -2 * mpmath.pi * F0
    zp = (1 + sp * T_S / 2) / (1 - sp * T_S / 2)
    _, a = bilinear_discretize(*second_order_lowpass(), T_S)
    poles = np.roots(a)
    np.testing.assert_allclose(poles.real, [float(zp)] * 2, rtol=0, atol=1e-6)
    # the mapping formula evaluates to 0.98441445 at f0 = 50 Hz, T_s = 50 us
    assert float(zp) == pytest.approx(0.9844144, abs=1e-7)


def test_bilinear_agrees_with_scipy():
    num, den = [3.0, 0.02], [1.0, 1e-3, 4e-7]
    b, a = bilinear_discretize(num, den, T_S)
    # scipy takes descending powers
    bs, as_ = signal.bilinear(num[::-1], den[::-1], fs=1.0 / T_S)
    np.testing.assert_allclose(b, bs / as_[0], rtol=1e-12)
    np.testing.assert_allclose(a, as_ / as_[0], rtol=1e-12)


def test_improper_rejected():
    with pytest.raises(ValueError, match="improper"):
        bilinear_discretize([0.0, 1.0], [1.0], T_S)


def test_integrator_keeps_its_pole_on_the_circle():
    b, a = bilinear_discretize([1.0], [0.0, 1.0], T_S)
    np.testing.assert_allclose(a, [1.0, -1.0])
    np.testing.assert_allclose(b, [T_S / 2, T_S / 2])


def test_dtf_identity():
    f = DiscreteTF([1.0], [1.0])
    assert [dtf_step(f, u) for u in (1.0, -2.0, 7.5)] == [1.0, -2.0, 7.5]
    assert f.order == 0


def test_dtf_step_response_settles_at_one():
    f = DiscreteTF(*bilinear_discretize(*second_order_lowpass(), T_S))
    y = [f.step(1.0) for _ in range(20000)]
    assert y[-1] == pytest.approx(1.0, abs=1e-9)


def test_dtf_impulse_geometric():
    f = DiscreteTF([0.5], [1.0, -0.5])
    y = [f.step(1.0 if k == 0 else 0.0) for k in range(6)]
    np.testing.assert_allclose(y, [0.5 * 0.5 ** k for k in range(6)], rtol=1e-15)
    assert f.order == 1


def test_dtf_matches_lfilter():
    b, a = bilinear_discretize([1.0, 2e-4], [1.0, 3e-3, 1e-6], T_S)
    u = np.sin(np.arange(500) * 0.07) + 0.3
    f = DiscreteTF(b, a)
    np.testing.assert_allclose([f.step(x) for x in u], signal.lfilter(b, a, u), rtol=1e-10, atol=1e-12)


def test_peek_does_not_advance():
    f = DiscreteTF([0.5], [1.0, -0.5])
    assert f.peek(1.0) == f.peek(1.0) == 0.5
    f.step(1.0)
    assert f.peek(0.0) == 0.25


def test_peak_law_oracle():
    # a ramp of slope v1/L starting at i_L0 reaches I_ref after d*T_s
    I_ref, i0, v1, L, T = 4.0, 3.0, 20.0, 1.0, 1.0
    t_hit = (I_ref - i0) / (v1 / L)
    assert duty_from_peak_limit(I_ref, i0, 0.0, T / L, v1) == pytest.approx(t_hit / T)
    assert duty_from_peak_limit(4.0, 3.0, 0.0, 1.0, 20.0) == pytest.approx(0.05)


def test_peak_law_zero_headroom():
    assert duty_from_peak_limit(3.0, 3.0, 0.0, 1.0, 20.0) == 0.0


def test_peak_law_with_slope_compensation():
    assert duty_from_peak_limit(4.0, 3.0, 5.0, 1.0, 20.0) == pytest.approx(1.0 / 25.0)


def test_peak_law_guard():
    warn = []
    assert duty_from_peak_limit(4.0, 3.0, 0.0, 1.0, -1.0, warn) == 1.0
    assert duty_from_peak_limit(4.0, 3.0, 0.0, 1.0, 0.0, warn) == 1.0
    assert len(warn) == 2


def test_peak_law_clamps():
    assert duty_from_peak_limit(100.0, 0.0, 0.0, 1.0, 1.0) == 1.0
    assert duty_from_peak_limit(1.0, 3.0, 0.0, 1.0, 20.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 10), st.floats(0, 5), st.floats(1e-3, 1),
       st.floats(1e-2, 100), st.floats(0.1, 10))
def test_peak_law_homogeneous(I_ref, i0, I_slope, G, v1, k):
    a = duty_from_peak_limit(I_ref, i0, I_slope, G, v1)
    b = duty_from_peak_limit(k * I_ref, k * i0, k * I_slope, G, k * v1)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


def test_smallest_candidate_wins():
    reg = regulator("pwm dpwm 0.6 ramp=1", "dutymax 0.85", "peaklimit iref=4 islope=0")
    dec = reg.evaluate({}, 1.0, PeakContext(i_L0=3.0, v1=20.0, G_L=1.0))
    assert dec.candidates == {"dpwm": 0.6, "dutymax": 0.85, "peaklimit": pytest.approx(0.05)}
    assert dec.duty == pytest.approx(0.05)
    assert reg.duty({}, 1.0, 3.0, 20.0, 1.0) == pytest.approx(0.05)


def test_single_candidate_below_clamp():
    reg = regulator("pwm dpwm 0.5 ramp=1", "dutymax 0.85")
    assert eval_duty(reg, {}, 0.0) == 0.5


def test_softstart_starts_at_zero():
    reg = regulator("pwm dpwm 0.9 ramp=1", "softstart 5m", "dutymax 0.85")
    assert eval_duty(reg, {}, 0.0) == 0.0
    assert eval_duty(reg, {}, 2.5e-3) == pytest.approx(0.425)
    assert eval_duty(reg, {}, 1.0) == 0.85


def test_pwm_divides_by_ramp():
    reg = regulator("probe vo node out", "sum e 3 -vo", "pwm dpwm e ramp=2.5")
    assert eval_duty(reg, {"vo": 1.0}, 0.0) == pytest.approx(0.8)
    assert eval_duty(reg, {"vo": 5.0}, 0.0) == 0.0


def test_block_graph_arithmetic():
    reg = regulator("probe a node out", "probe b node in", "gain g a 2", "mult m g b",
                    "limit l m -1 5", "sum s l -a 0.25", "pwm dpwm s ramp=10")
    dec = reg.evaluate({"a": 1.5, "b": 3.0}, 0.0)
    assert dec.signals["g"] == 3.0
    assert dec.signals["m"] == 9.0
    assert dec.signals["l"] == 5.0
    assert dec.signals["s"] == pytest.approx(3.75)
    assert dec.duty == pytest.approx(0.375)


def test_filters_advance_only_on_commit():
    reg = regulator("probe vo node out", "tf h vo num=0,1e-3 den=1,1e-3", "pwm dpwm h ramp=1")
    first = reg.evaluate({"vo": 1.0}, 0.0).signals["h"]
    again = reg.evaluate({"vo": 1.0}, 0.0).signals["h"]
    assert first == again
    reg.evaluate({"vo": 1.0}, 0.0, commit=True)
    assert reg.evaluate({"vo": 1.0}, 0.0).signals["h"] != first


def test_peak_sense_gain_scales_reference():
    reg = regulator("peaklimit iref=0.8 islope=0 sense=0.2")
    dec = reg.evaluate({}, 0.0)
    assert dec.peak == (pytest.approx(4.0), 0.0)


def test_graph_without_candidates_rejected():
    circuit, graph = parse_netlist("VIN 1 0 DC 20\nXCELL 1 2 0 BUCKCELL L=1m\nRL 2 0 10\n"
                                   ".fs 20k\n.tran 1m\n")
    with pytest.raises(NetlistError, match="duty candidate"):
        Regulator(graph, circuit.T_s)


@settings(max_examples=200, deadline=None)
@given(pwm=st.floats(-2, 2), dmax=st.floats(0.05, 1), t=st.floats(0, 0.02),
       i0=st.floats(0, 8), v1=st.floats(-10, 60), iref=st.floats(-2, 8))
def test_min_rule_and_clamp(pwm, dmax, t, i0, v1, iref):
    reg = regulator(f"pwm dpwm {pwm!r} ramp=1", f"dutymax {dmax!r}", "softstart 5m",
                    f"peaklimit iref={iref!r} islope=0")
    dec = reg.evaluate({}, t, PeakContext(i0, v1, 0.05))
    assert 0.0 <= dec.duty <= dmax
    clamped = [min(max(c, 0.0), dmax) for c in dec.candidates.values()]
    assert dec.duty <= min(clamped) + 1e-15
    assert any(dec.duty == pytest.approx(c, abs=1e-15) for c in clamped)
    assert reg.duty({}, t, i0, v1, 0.05) == pytest.approx(dec.duty, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(1.0, 2e4), st.floats(1e-6, 1e-3))
def test_stable_filters_stay_stable(zeta, wn, T):
    assume(wn * T < 50)
    den = [1.0, 2 * zeta / wn, 1.0 / wn ** 2]
    _, a = bilinear_discretize([1.0], den, T)
    assert np.all(np.abs(np.roots(a)) < 1.0)
