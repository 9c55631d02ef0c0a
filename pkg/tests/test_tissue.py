import numpy as np
import pytest

from erpcal import tissue as T
from erpcal.cell import EPFields
from erpcal.io import read_csv, read_vtk
from erpcal.shapes import rectangle
from erpcal.strip import CaptureError


def uniform(n, **kw):
    vals = dict(cv_max=0.7, tau_in=0.05, tau_out=6.0, tau_open=120.0, apd_max=180.0)
    vals.update(kw)
    return EPFields(**{k: np.full(n, float(v)) for k, v in vals.items()})


def _corner_run(nx, n_beats=1, cycle=150.0):
    m = rectangle(20.0, 20.0, nx, nx)
    maps = T.run_monodomain(m, uniform(m.n_vertices), 0, n_beats=n_beats, cycle_ms=cycle)
    return m, maps


def _radial_cv(m, maps):
    d = np.linalg.norm(m.vertices, axis=1)
    sel = (d > 4.0) & (d < 16.0)
    slope, icpt = np.polyfit(d[sel], maps.act_ms[sel], 1)
    resid = maps.act_ms[sel] - (slope * d[sel] + icpt)
    return 1.0 / slope, resid


@pytest.fixture(scope="module")
def sheet_run():
    return _corner_run(41, n_beats=2, cycle=600.0)


def test_corner_pacing_circular_front(sheet_run):
    m, maps = sheet_run
    assert maps.captured.all()
    cv, resid = _radial_cv(m, maps)
    # isochrones are arcs around the corner: time is linear in radius
    assert np.abs(resid).max() < 1.0
    assert abs(cv / 0.7 - 1) < 0.10
    speed = T.conduction_velocity(m, maps.act_ms)
    assert abs(np.median(speed) / 0.7 - 1) < 0.10


def test_uniform_apd(sheet_run):
    m, maps = sheet_run
    xy = m.vertices[:, :2]
    away = (np.linalg.norm(xy, axis=1) > 4.0) & np.all((xy > 2.0) & (xy < 18.0), axis=1)
    a = maps.apd[90][away]
    assert a.max() - a.min() < 5.0
    for l1, l2 in ((20, 30), (30, 50), (50, 90)):
        assert np.all(maps.apd[l1] <= maps.apd[l2])


def test_refinement_changes_cv_little(sheet_run):
    cv_coarse, _ = _radial_cv(*sheet_run)
    cv_fine, _ = _radial_cv(*_corner_run(81))
    assert abs(cv_fine / cv_coarse - 1) < 0.05


def test_zero_amplitude_fails_capture():
    m = rectangle(10.0, 10.0, 21, 21)
    with pytest.raises(CaptureError, match="failure of capture"):
        T.run_monodomain(m, uniform(m.n_vertices), 0, n_beats=1, cycle_ms=50.0,
                         config=T.TissueConfig(amplitude=0.0))


def test_zero_diffusion_no_stimulus_is_stationary():
    m = rectangle(10.0, 10.0, 11, 11)
    s = T.MonodomainSolver(m, uniform(m.n_vertices), T.TissueConfig(tune_cv=False, diffusivity_scale=0.0))
    (V, h), act, _ = s.run(np.zeros(m.n_vertices, bool), [], 200.0, 1.0, record_from=0.0)
    assert np.all(V == 0.0) and np.all(h == 1.0) and np.all(np.isnan(act))


def test_voltage_stays_bounded():
    m = rectangle(10.0, 10.0, 21, 21)
    f = uniform(m.n_vertices, tau_out=2.0, apd_max=250.0, cv_max=1.2)
    s = T.MonodomainSolver(m, f)
    mask = s.stim_vertices(0)
    state = None
    for k in range(40):
        state, _, _ = s.run(mask, [0.0] if k == 0 else [], 5.0, 0.5, state=state)
        assert -0.05 <= state[0].min() and state[0].max() <= 1.05


def test_apd_rmse():
    a = T.ActivationMaps(np.zeros(4), {90: np.array([200.0, 210, 190, np.nan])})
    assert T.apd_rmse(a, a) == 0.0
    b = T.ActivationMaps(np.zeros(4), {90: a.apd[90] + 5})
    assert T.apd_rmse(a, b) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        T.apd_rmse(a, T.ActivationMaps(np.zeros(3), {90: np.zeros(3)}))


def test_maps_export(tmp_path, sheet_run):
    m, maps = sheet_run
    maps.to_vtk(tmp_path / "a.vtk", m, {"config_hash": "x"})
    maps.to_csv(tmp_path / "a.csv")
    _, arrays, meta = read_vtk(tmp_path / "a.vtk")
    assert set(arrays) == {"act_ms", "apd20_ms", "apd30_ms", "apd50_ms", "apd90_ms"}
    assert meta["config_hash"] == "x"
    cols, _ = read_csv(tmp_path / "a.csv")
    np.testing.assert_allclose(cols["apd90_ms"], maps.apd[90])


def test_conduction_velocity_linear_field():
    m = rectangle(5.0, 5.0, 6, 6)
    act = m.vertices[:, 0] / 0.5
    np.testing.assert_allclose(T.conduction_velocity(m, act), 0.5)


def test_bad_inputs():
    m = rectangle(5.0, 5.0, 6, 6)
    with pytest.raises(ValueError):
        T.run_monodomain(m, uniform(m.n_vertices), 999)
    with pytest.raises(ValueError):
        T.run_monodomain(m, uniform(m.n_vertices), 0, n_beats=0)
    with pytest.raises(ValueError):
        T.MonodomainSolver(m, uniform(m.n_vertices, tau_out=50.0))
