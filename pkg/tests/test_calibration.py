import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from erpcal import calibration as cal
from erpcal.gp import HyperState


def test_observe_examples():
    assert cal.observe(204.0, 10.0) == (200.0, 210.0)
    assert cal.observe(200.0, 10.0) == (200.0, 210.0)
    assert cal.observe(204.0, 1.0) == (204.0, 205.0)
    assert cal.observe(204.0, 10.0, origin=5.0) == (195.0, 205.0)
    with pytest.raises(ValueError):
        cal.observe(204.0, 0.0)


@settings(max_examples=200)
@given(st.floats(100, 300), st.sampled_from([1.0, 2.0, 5.0, 10.0]), st.floats(-20, 20))
def test_observe_brackets(true, res, origin):
    lo, hi = cal.observe(true, res, origin)
    assert lo <= true + 1e-9 < hi
    assert np.isclose(hi - lo, res)
    k = (lo - origin) / res
    assert np.isclose(k, round(k))


def test_observation_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        cal.ERPObservation(0, "S4", 200, 210, 10)
    with pytest.raises(ValueError):
        cal.ERPObservation(0, "S2", 200, 210, 0)
    e2 = np.array([204.0, 231.0, 250.0])
    obs = cal.make_observations(e2, e2 - 20, [0, 2], 10.0)
    assert [(o.vertex, o.kind, o.lo) for o in obs] == [(0, "S2", 200), (0, "S3", 180), (2, "S2", 250), (2, "S3", 230)]
    assert [o.kind for o in cal.make_observations(e2, e2, [1], kinds=("S3",))] == ["S3"]
    cal.observations_to_csv(obs, tmp_path / "o.csv", {"config_hash": "h"})
    text = (tmp_path / "o.csv").read_text()
    assert "vertex_id,kind,interval_lo_ms,interval_hi_ms,resolution_ms" in text
    assert cal.observations_from_csv(tmp_path / "o.csv") == obs


def density(f, lo=200.0, hi=210.0, **kw):
    return np.exp(cal.log_likelihood_interval(f, lo, hi, **kw))


def test_likelihood_examples():
    assert density(205.0) == pytest.approx(0.100, abs=1e-3)
    # independent oracle: direct sum of normal pdfs at the sub-interval centres
    oracle = norm.pdf(200.5, np.arange(200.5, 210), 1.0).mean()
    assert density(200.5) == pytest.approx(oracle, rel=1e-12)
    assert round(float(density(200.5)), 4) == 0.0699
    far = cal.log_likelihood_interval(260.0, 200.0, 210.0)
    assert np.isfinite(far) and far < -1000
    assert np.isfinite(cal.log_likelihood_interval(2000.0, 200.0, 210.0))


def test_likelihood_normalisation_and_shape():
    f = np.linspace(150.0, 260.0, 110001)
    p = density(f)
    assert abs(np.trapezoid(p, f) - 1) < 1e-6
    assert abs(density(205.0) / density(202.0) - 1) < 0.05
    # log scale: the density itself underflows far out in the tails
    upper = cal.log_likelihood_interval(np.arange(210.0, 260.0), 200.0, 210.0)
    lower = cal.log_likelihood_interval(np.arange(150.0, 201.0), 200.0, 210.0)
    assert np.all(np.diff(upper) < 0) and np.all(np.diff(lower) > 0)


def test_likelihood_gradient_and_pad():
    f = np.linspace(190.0, 220.0, 31)
    v, g = cal.log_likelihood_interval(f, 200.0, 210.0, return_grad=True)
    h = 1e-6
    fd = (cal.log_likelihood_interval(f + h, 200.0, 210.0) - cal.log_likelihood_interval(f - h, 200.0, 210.0)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
    # padding by 2 ms equals the unpadded mixture on the wider interval
    np.testing.assert_allclose(cal.log_likelihood_interval(f, 200.0, 210.0, pad=2.0),
                               cal.log_likelihood_interval(f, 198.0, 212.0))


# ---------------------------------------------------------------------------
# posterior

@pytest.fixture(scope="module")
def small_problem(sheet_basis, surrogate):
    g = np.random.default_rng(7)
    verts = g.choice(sheet_basis.n_vertices, 6, replace=False)
    e2 = np.full(sheet_basis.n_vertices, 215.0) + g.normal(0, 10, sheet_basis.n_vertices)
    obs = cal.make_observations(e2, e2 - 25, verts, 10.0)
    return sheet_basis, obs, surrogate


def _random_u(g, K):
    return np.r_[g.uniform(4, 20), g.uniform(140, 220), g.normal(2.0, 0.5, 2), g.normal(1.5, 0.5, 2),
                 g.normal(0, 1, 2 * K)]


def test_gradient_matches_finite_differences(small_problem):
    basis, obs, sur = small_problem
    t = cal.PosteriorTarget(basis, obs, sur, K=8, length_unit=10.0)
    g = np.random.default_rng(3)
    for _ in range(20):
        u = _random_u(g, 8)
        v, grad = t(u)
        rv, rgrad = t.reference(u)
        assert v == pytest.approx(rv, rel=1e-10)
        np.testing.assert_allclose(grad, rgrad, rtol=1e-8, atol=1e-9)
        fd = np.empty_like(u)
        for i in range(u.size):
            e = np.zeros_like(u)
            e[i] = 1e-5 * max(1.0, abs(u[i]))
            fd[i] = (t(u + e)[0] - t(u - e)[0]) / (2 * e[i])
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5 * np.abs(grad).max())


def test_penalty_region_gradient(small_problem):
    basis, obs, sur = small_problem
    t = cal.PosteriorTarget(basis, obs, sur, K=8)
    u = np.r_[28.0, 265.0, 1.0, 1.0, 1.0, 1.0, np.zeros(16)]
    v, grad = t(u)
    assert t.reference(u)[0] == pytest.approx(v)
    assert t.n_flagged > 0
    # the penalty pushes the means back into the valid region
    assert grad[0] < 0 and grad[1] < 0


def test_zero_observations_is_prior(sheet_basis, surrogate):
    t = cal.PosteriorTarget(sheet_basis, [], surrogate, K=8)
    u = _random_u(np.random.default_rng(0), 8)
    v, g = t(u)
    pv, pg = t.log_prior(u)
    assert v == pytest.approx(pv, rel=1e-12)
    np.testing.assert_allclose(g, pg, rtol=1e-12)
    h = HyperState.from_vector(u, 8)
    assert cal.log_posterior(h, [], sheet_basis, surrogate)[0] == pytest.approx(v)


def test_flat_field_grid_oracle(sheet_basis, surrogate):
    # with eta = 0 every field is flat and equal to its mean
    obs = [cal.ERPObservation(10, "S2", 200.0, 210.0, 10.0)]
    t = cal.PosteriorTarget(sheet_basis, obs, surrogate, K=4)
    apd = 170.0
    grid = np.linspace(1.0, 30.0, 2901)
    u0 = t.initial_point()
    u0[1] = apd
    lp = []
    for m in grid:
        u0[0] = m
        lp.append(t(u0)[0] - t.log_prior(u0)[0])
    lp = np.array(lp)
    s2 = surrogate.value("erp_s2", grid, apd)
    oracle = cal.log_likelihood_interval(np.minimum(s2, surrogate.cutoff), 200.0, 210.0)
    oracle -= np.maximum(s2 - surrogate.cutoff, 0) ** 2
    np.testing.assert_allclose(lp, oracle, rtol=1e-9, atol=1e-9)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    inside = (s2 >= 200.0) & (s2 <= 210.0)
    assert w[inside].sum() > 0.85


def test_map_bounded_information(small_problem):
    basis, obs, sur = small_problem
    t = cal.PosteriorTarget(basis, obs, sur, K=8, length_unit=10.0)
    u, lp = cal.find_map(t, n_starts=2, seed=0)
    s = cal.posterior_fields(u[None], basis, sur, 8, length_unit=10.0, repair=False)
    used = {o.vertex for o in obs}
    v = next(i for i in range(basis.n_vertices) if i not in used)
    pred = s.mean["erp_s2"][v]
    lo, hi = cal.observe(pred, 10.0)
    t2 = cal.PosteriorTarget(basis, obs + [cal.ERPObservation(v, "S2", lo, hi, 10.0)], sur, K=8, length_unit=10.0)
    before, after = t(u)[0], t2(u)[0]
    assert after >= before - (np.log(10.0) + 1)


def test_find_map_improves_on_start(small_problem):
    basis, obs, sur = small_problem
    t = cal.PosteriorTarget(basis, obs, sur, K=8, length_unit=10.0)
    u, lp = cal.find_map(t, n_starts=2, seed=1)
    t.jacobian = False
    assert lp >= t(t.initial_point())[0]
    assert lp == pytest.approx(t(u)[0])
    # an extra start at the optimum cannot make the result worse
    u2, lp2 = cal.find_map(t, n_starts=1, seed=1, starts=u[None])
    assert lp2 >= lp - 1e-6


def test_find_map_survives_overflowing_steps(small_problem, monkeypatch):
    basis, obs, sur = small_problem
    t = cal.PosteriorTarget(basis, obs, sur, K=8, length_unit=10.0)
    call = cal.PosteriorTarget.__call__

    def guarded(self, u):
        if np.abs(u[2:6]).max() > 6:
            raise FloatingPointError("non-finite log posterior")
        return call(self, u)
    monkeypatch.setattr(cal.PosteriorTarget, "__call__", guarded)
    u, lp = cal.find_map(t, n_starts=3, seed=0)
    assert np.isfinite(lp) and np.abs(u[2:6]).max() <= 6


def test_posterior_fields_single_and_permutation(sheet_basis, surrogate):
    g = np.random.default_rng(11)
    draws = np.array([_random_u(g, 8) for _ in range(6)])
    draws[:, 1] = g.uniform(150, 190, 6)
    draws[:, 2:4] = 0.0
    one = cal.posterior_fields(draws[:1], sheet_basis, surrogate, 8, length_unit=10.0)
    for k in one.sd:
        assert np.all(one.sd[k] == 0)
        np.testing.assert_array_equal(one.mean[k], one.map_fields[k])
    lp = g.normal(size=6)
    a = cal.posterior_fields(draws, sheet_basis, surrogate, 8, length_unit=10.0, log_density=lp)
    p = g.permutation(6)
    b = cal.posterior_fields(draws[p], sheet_basis, surrogate, 8, length_unit=10.0, log_density=lp[p])
    for k in a.mean:
        np.testing.assert_allclose(a.mean[k], b.mean[k], rtol=1e-10)
        np.testing.assert_allclose(a.sd[k], b.sd[k], rtol=1e-7, atol=1e-9)
        np.testing.assert_array_equal(a.map_fields[k], b.map_fields[k])
    with pytest.raises(ValueError):
        cal.posterior_fields(np.zeros((0, draws.shape[1])), sheet_basis, surrogate, 8)
    # an explicit MAP point replaces the best-draw fields and leaves the moments alone
    c = cal.posterior_fields(draws, sheet_basis, surrogate, 8, length_unit=10.0, log_density=lp,
                             map_point=draws[0])
    for k in a.mean:
        np.testing.assert_array_equal(c.mean[k], a.mean[k])
        np.testing.assert_array_equal(c.map_fields[k], one.map_fields[k])


def test_ise_and_rmse():
    assert cal.ise(200.0, 210.0, 5.0) == 2.0
    assert cal.ise(200.0, 200.0, 3.0) == 0.0
    assert np.isnan(cal.ise(200.0, 201.0, 0.0))
    assert cal.rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert cal.rmse([0, 0], [3, 4], mask=[False, True]) == 4.0


def test_trend_fractions():
    s = {"lengthscale": [5, 5, 20, 20], "n_obs": [5, 20, 5, 20], "resolution_ms": [10] * 4,
         "rmse_mean": [10.0, 8.0, 6.0, 7.0]}
    f = cal.trend_fractions(s)
    assert f["lengthscale"] == 1.0 and f["n_obs"] == 0.5 and f["overall"] == 0.75


def test_validate_deterministic(sheet, sheet_basis, surrogate):
    cfg = cal.ValidationConfig(lengthscales=(5.0, 20.0), n_observations=(5,), resolutions=(10.0,),
                               replicates=1, K=12, truth_K=32, length_unit=10.0, map_starts=2)
    a = cal.validate(cfg, sheet, sheet_basis, surrogate)
    b = cal.validate(cfg, sheet, sheet_basis, surrogate)
    assert a.columns() == b.columns()
    assert all(r["status"] == "ok" for r in a.rows)
    assert a.summary()["n"] == [1, 1]
