import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivdistill.kernelreg import fit_lcr, fit_llr, predict, rule_of_thumb_bandwidth


def test_local_linear_exact_on_lines():
    rng = np.random.default_rng(1)
    p = rng.uniform(0, 1, 200)
    v = 2.5 * p - 0.7
    for h in (0.02, 0.1, 0.5, 3.0):
        fit = fit_llr(p, v, bandwidth=h)
        np.testing.assert_allclose(predict(fit, p), v, atol=1e-8)
        np.testing.assert_allclose(predict(fit, [0.25, 0.8]), [2.5 * 0.25 - 0.7, 2.5 * 0.8 - 0.7], atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(
    slope=st.floats(-5, 5, allow_nan=False),
    intercept=st.floats(-5, 5, allow_nan=False),
    seed=st.integers(0, 10_000),
)
def test_affine_exactness_property(slope, intercept, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-2, 2, 50)
    if np.ptp(p) == 0:
        return
    v = slope * p + intercept
    h = rule_of_thumb_bandwidth(p)
    fit = fit_llr(p, v, bandwidth=max(h, 1e-3))
    np.testing.assert_allclose(predict(fit, p), v, atol=1e-8 * max(1.0, np.abs(v).max()))


def test_llr_recovers_smooth_signal():
    rng = np.random.default_rng(7)
    n = 2000
    p = rng.uniform(0, 1, n)
    truth = np.sin(6 * p)
    v = truth + rng.normal(scale=0.1, size=n)
    fit = fit_llr(p, v)
    pred = predict(fit, p)
    rmse = np.sqrt(np.mean((pred - truth) ** 2))
    assert rmse < 0.05


def test_tied_predictors_small_bandwidth_weighted_mean():
    p = np.array([0.2, 0.2, 0.2, 0.8, 0.8])
    v = np.array([1.0, 2.0, 4.0, 10.0, 12.0])
    w = np.array([1.0, 1.0, 2.0, 1.0, 1.0])
    fit = fit_lcr(p, v, w, bandwidth=1e-6 * 0.6)
    target = np.average(v[:3], weights=w[:3])
    assert predict(fit, [0.2])[0] == pytest.approx(target, rel=1e-9)


def test_nw_constant_series():
    p = np.linspace(0, 1, 30)
    v = np.full(30, 3.25)
    for h in (0.01, 0.3, 2.0):
        fit = fit_lcr(p, v, bandwidth=h)
        np.testing.assert_allclose(predict(fit, p), 3.25, atol=1e-12)
    fit = fit_lcr(p, v)
    np.testing.assert_allclose(predict(fit, p), 3.25, atol=1e-12)


def test_nw_independent_binary_target():
    rng = np.random.default_rng(21)
    n = 5000
    p = rng.uniform(0, 1, n)
    v = (rng.random(n) < 0.4).astype(float)
    fit = fit_lcr(p, v)
    pred = predict(fit, np.linspace(0.1, 0.9, 9))
    # local binomial noise: roughly n * h effective observations per point
    se_local = np.sqrt(0.4 * 0.6 / (n * fit.bandwidth))
    assert np.all(np.abs(pred - v.mean()) < 3 * se_local)


def test_single_training_point_nw():
    fit = fit_lcr([0.5], [7.0], bandwidth=0.3)
    np.testing.assert_allclose(predict(fit, [0.0, 0.5, 1.0]), 7.0)


def test_zero_variance_predictor():
    with pytest.raises(ValueError, match="zero variance"):
        fit_llr(np.full(10, 0.3), np.arange(10.0))
    fit = fit_lcr(np.full(10, 0.3), np.arange(10.0))
    np.testing.assert_allclose(predict(fit, [0.1, 0.9]), np.arange(10.0).mean())


def test_reorder_invariance():
    rng = np.random.default_rng(4)
    p = rng.uniform(0, 1, 120)
    v = np.cos(3 * p) + rng.normal(scale=0.05, size=120)
    fit = fit_llr(p, v)
    perm = rng.permutation(120)
    fit2 = fit_llr(p[perm], v[perm])
    at = np.linspace(0.05, 0.95, 11)
    assert fit.bandwidth == pytest.approx(fit2.bandwidth)
    np.testing.assert_allclose(predict(fit, at), predict(fit2, at), atol=1e-10)


def test_cv_minimizer_is_grid_minimum():
    rng = np.random.default_rng(9)
    p = rng.uniform(0, 1, 150)
    v = np.sin(4 * p) + rng.normal(scale=0.2, size=150)
    for fitter in (fit_llr, fit_lcr):
        fit = fitter(p, v)
        hs, scores = fit.cv_grid[:, 0], fit.cv_grid[:, 1]
        assert fit.cv_score == pytest.approx(scores.min())
        assert fit.bandwidth == pytest.approx(hs[int(np.argmin(scores))])


def test_llr_singular_local_design_falls_back():
    # mass point far from the query: all kernel weight on one predictor value
    p = np.array([0.2, 0.2, 0.2, 0.2, 0.9])
    v = np.array([1.0, 1.0, 3.0, 3.0, 8.0])
    fit = fit_llr(p, v, bandwidth=0.005)
    assert predict(fit, [0.2])[0] == pytest.approx(2.0)


def test_cv_requires_five_points():
    with pytest.raises(ValueError, match="at least 5"):
        fit_llr([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
