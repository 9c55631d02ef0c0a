import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erpcal import strip as S
from erpcal.cell import (PARAM_RANGES, EPParams, MMSRawParams, ParameterError, from_raw, raw_arrays,
                         step_cell, to_raw)

MID = EPParams(cv_max=0.7, tau_in=0.05, tau_out=6.0, tau_open=120.0, apd_max=180.0)

valid = st.builds(EPParams, *(st.floats(*PARAM_RANGES[n]) for n in PARAM_RANGES))


def test_to_raw_examples():
    r = to_raw(MID)
    assert np.isclose(r.diffusivity, 0.05 * (0.7 / 0.4) ** 2 / 2)
    assert round(r.diffusivity, 4) == 0.0766
    assert np.isclose(r.tau_close, 180 / np.log(25.3))
    assert round(r.tau_close, 2) == 55.71
    assert r.v_gate == 0.1


@settings(max_examples=200)
@given(valid)
def test_raw_roundtrip(p):
    back = from_raw(to_raw(p))
    np.testing.assert_allclose(back.as_array(), p.as_array(), rtol=1e-10)


@settings(max_examples=50)
@given(valid)
def test_raw_arrays_matches_scalar(p):
    r = to_raw(p)
    arr = raw_arrays({n: getattr(p, n) for n in PARAM_RANGES})
    np.testing.assert_allclose([float(a) for a in arr],
                               [r.tau_in, r.tau_out, r.tau_open, r.tau_close, r.diffusivity], rtol=1e-14)


def test_to_raw_errors():
    with pytest.raises(ParameterError):
        to_raw(MID.replace(tau_out=0.5))
    with pytest.raises(ParameterError, match="singular"):
        to_raw(MID.replace(tau_out=0.0), check=False)
    with pytest.raises(ParameterError):
        MMSRawParams(0.05, 6, 120, 55, 0.07, v_gate=0.6)


def test_step_cell_examples():
    raw = MMSRawParams(0.05, 6.0, 100.0, 60.0, 0.07)
    assert step_cell((0.0, 1.0), raw, 0.0, 0.02) == (0.0, 1.0)
    v, h = step_cell((0.0, 0.5), raw, 0.0, 1.0)
    assert v == 0.0 and np.isclose(h, 0.505)
    _, h = step_cell((0.5, 1.0), raw, 0.0, 1.0)
    assert np.isclose(h, 1 - 1 / 60)
    with pytest.raises(ValueError):
        step_cell((0.0, 1.0), raw, 0.0, 0.0)


@settings(max_examples=100)
@given(valid, st.floats(0.001, 1.0))
def test_rest_is_fixed_point(p, dt):
    v, h = step_cell((0.0, 1.0), to_raw(p), 0.0, dt)
    assert abs(v) < 1e-12 and abs(h - 1) < 1e-12


def test_protocol_validation():
    with pytest.raises(ValueError):
        S.PacingProtocol(resolution=0)
    with pytest.raises(ValueError):
        S.PacingProtocol(kind="S1S2S3", s2=40.0)
    with pytest.raises(ValueError):
        S.PacingProtocol(kind="S1S3")


def test_strip_capture_from_rest():
    res = S.simulate_strip(MID, [0.0], 150.0)
    assert res.captured.tolist() == [True]
    assert S.upward_crossings(res.trace.time, res.trace.vm).size == 1


def test_strip_second_stimulus_too_early():
    res = S.simulate_strip(MID, [0.0, 10.0], 250.0)
    assert res.captured.tolist() == [True, False]


def test_strip_zero_amplitude():
    res = S.simulate_strip(MID, [0.0], 150.0, S.StripConfig(amplitude=0.0))
    assert not res.captured.any()


def test_strip_rejects_unsorted_stimuli():
    with pytest.raises(ValueError):
        S.simulate_strip(MID, [10.0, 0.0], 50.0)


def test_measure_erp_bracketing():
    prot = S.PacingProtocol()
    erp = S.measure_erp(MID, prot, precision=1.0)
    assert 120 <= erp <= 280
    assert S.coupling_captures(MID, prot, erp + 5)
    assert not S.coupling_captures(MID, prot, erp - 5)


def test_erp_s3_not_above_s2():
    s2 = S.measure_erp(MID, S.PacingProtocol("S1S2"))
    s3 = S.measure_erp(MID, S.PacingProtocol("S1S2S3"))
    assert s3 <= s2
    pair = S.measure_erp_pair(MID)
    assert pair == (s2, s3)


def test_erp_precision_guard():
    with pytest.raises(ValueError):
        S.measure_erp(MID, precision=0.1)


def test_s2_failure_raises():
    # S2 shorter than ERP_S2 cannot capture
    with pytest.raises(S.CaptureError):
        S.measure_erp(MID, S.PacingProtocol("S1S2S3", s2=120.0))
    s2, s3 = S.measure_erp_pair(MID, s2=120.0)
    assert np.isfinite(s2) and np.isnan(s3)


def test_measure_apd_triangle():
    t = np.linspace(0, 400, 4001)
    peak = 10 / 0.7
    end = peak + (210 - peak) / 0.9
    # rises through 0.7 at t=10, falls through 0.1 at t=210
    v = np.interp(t, [0, peak, end, 400], [0, 1.0, 0.0, 0.0])
    apd = S.measure_apd(S.ActionPotentialTrace(t, v))
    assert np.isclose(apd[90], 200.0, atol=1e-6)
    assert apd[20] <= apd[30] <= apd[50] <= apd[90]
    with pytest.raises(ValueError):
        S.measure_apd(S.ActionPotentialTrace(t, np.zeros_like(t)))


def test_strip_apd_ordering():
    res = S.simulate_strip(MID, [0.0, 600.0], 1100.0)
    apd = S.measure_apd(res.trace)
    assert apd[20] <= apd[30] <= apd[50] <= apd[90]


def test_trace_validation(tmp_path):
    with pytest.raises(ValueError):
        S.ActionPotentialTrace([0, 1, 1], [0, 0, 0])
    tr = S.ActionPotentialTrace([0, 1], [0, 0.5])
    tr.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "time_ms,vm"


def test_tuned_cable_conducts_at_target():
    for cv in (0.3, 0.7, 1.2):
        raw = S.strip_raw(MID.replace(cv_max=cv))
        assert abs(S.cable_cv(raw) / cv - 1) < 0.02


def test_time_step_refinement():
    g = np.random.default_rng(5)
    fine = S.StripConfig(dt_ms=0.05)
    lo = {"cv_max": 0.3, "tau_out": 2.0, "apd_max": 130.0}
    hi = {"cv_max": 1.2, "tau_out": 25.0, "apd_max": 240.0}
    for _ in range(10):
        p = MID.replace(**{k: float(g.uniform(lo[k], hi[k])) for k in lo})
        a = S.measure_erp(p, precision=0.5)
        b = S.measure_erp(p, precision=0.5, config=fine)
        assert abs(a - b) < 2.0, (p, a, b)
