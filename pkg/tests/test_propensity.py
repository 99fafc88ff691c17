import numpy as np
import pytest
from scipy.stats import norm

from ivdistill.dataset import make_dataset
from ivdistill.propensity import (
    ProbitError,
    PropensityDesign,
    PropensityFit,
    _probit_loglik,
    _probit_score_info,
    build_design,
    fit_probit,
    predict_scores,
)

NO_INTERACT = PropensityDesign(include_interactions=False)


def _sim_selection(n, rng, alpha0=-0.3, alpha1=0.4, delta=(0.5, -0.8, 0.25)):
    """Threshold-crossing selection with a binary instrument."""
    delta = np.asarray(delta)
    x = rng.normal(size=(n, delta.size))
    z = rng.integers(0, 2, n)
    d = (alpha0 * (1 - z) + alpha1 * z + x @ delta + rng.normal(size=n) >= 0).astype(int)
    return make_dataset(y=rng.normal(size=n), d=d, x=x, z=z)


def test_independent_treatment_recovers_mean():
    rng = np.random.default_rng(5)
    n = 4000
    ds = make_dataset(
        y=rng.normal(size=n),
        d=rng.integers(0, 2, n),
        x=rng.normal(size=(n, 2)),
        z=rng.integers(0, 2, n),
    )
    fit = fit_probit(ds, NO_INTERACT)
    dbar = ds.d.mean()
    assert fit.coef[0] == pytest.approx(norm.ppf(dbar), abs=0.05)
    assert np.all(np.abs(fit.coef[1:]) < 0.08)


def test_simulate_and_refit_within_two_se():
    rng = np.random.default_rng(99)
    alpha0, alpha1 = norm.ppf(0.45), norm.ppf(0.55)
    delta = (0.6, -0.4, 0.2)
    ds = _sim_selection(50_000, rng, alpha0, alpha1, delta)
    fit = fit_probit(ds, NO_INTERACT)
    truth = np.array([alpha0, alpha1 - alpha0, *delta])
    assert fit.converged
    np.testing.assert_array_less(np.abs(fit.coef - truth), 2.0 * fit.se)


def test_gradient_small_at_optimum():
    rng = np.random.default_rng(17)
    ds = _sim_selection(800, rng)
    fit = fit_probit(ds, NO_INTERACT)
    assert fit.ridge_used == 0.0
    X, _ = build_design(ds, NO_INTERACT)
    grad, _ = _probit_score_info(fit.coef, X[:, fit.kept_columns], ds.d.astype(float), ds.weight, 0.0)
    assert np.max(np.abs(grad)) < 1e-6 * ds.n


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    n, k = 60, 2
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
    y = rng.integers(0, 2, n).astype(float)
    w = rng.uniform(0.5, 2.0, n)
    beta = rng.normal(scale=0.5, size=k + 1)
    grad, _ = _probit_score_info(beta, X, y, w, 0.0)
    h = 1e-5
    for j in range(k + 1):
        e = np.zeros(k + 1)
        e[j] = h
        fd = (_probit_loglik(beta + e, X, y, w, 0.0) - _probit_loglik(beta - e, X, y, w, 0.0)) / (2 * h)
        assert abs(grad[j] - fd) < 1e-4 * max(1.0, abs(fd))


def test_scores_invariant_under_affine_rescaling():
    rng = np.random.default_rng(11)
    ds = _sim_selection(500, rng)
    fit = fit_probit(ds, NO_INTERACT)
    x2 = ds.x.copy()
    x2[:, 0] = 100.0 * x2[:, 0] + 5.0
    ds2 = make_dataset(y=ds.y, d=ds.d, x=x2, z=ds.z)
    fit2 = fit_probit(ds2, NO_INTERACT)
    np.testing.assert_allclose(fit.fitted, fit2.fitted, atol=1e-10)


def test_separation_triggers_ridge():
    x = np.linspace(-1, 1, 40)[:, None]
    d = (x[:, 0] > 0).astype(int)
    z = np.tile([0, 1], 20)
    ds = make_dataset(y=np.zeros(40), d=d, x=x, z=z)
    with pytest.warns(UserWarning, match="quasi-separation"):
        fit = fit_probit(ds, NO_INTERACT)
    assert fit.ridge_used > 0.0
    assert fit.converged


def _crafted_fit(ds, coef, design=NO_INTERACT):
    raw, names = build_design(ds, design)
    kept = np.arange(raw.shape[1])
    return PropensityFit(
        coef=np.asarray(coef, float),
        se=np.zeros(len(coef)),
        fitted=np.zeros(ds.n),
        converged=True,
        iterations=0,
        ridge_used=0.0,
        loglik=0.0,
        design=design,
        column_names=names,
        kept_columns=kept,
    )


def test_zero_coefficients_give_half():
    rng = np.random.default_rng(0)
    ds = _sim_selection(50, rng)
    fit = _crafted_fit(ds, np.zeros(2 + ds.k_x))
    np.testing.assert_allclose(predict_scores(fit, ds), 0.5)


def test_extreme_index_is_clamped():
    rng = np.random.default_rng(0)
    ds = _sim_selection(50, rng)
    coef = np.zeros(2 + ds.k_x)
    coef[0] = 8.0
    scores = predict_scores(_crafted_fit(ds, coef), ds)
    assert np.all(scores == 1.0 - 1e-6)


def test_instrument_shift_quantile():
    # selection index alpha1 = Phi^{-1}(0.55) at x = 0, z = 1 gives p = 0.55
    ds = make_dataset(
        y=[0.0, 0.0, 0.0],
        d=[0, 1, 1],
        x=np.zeros((3, 1)),
        z=[0, 1, 1],
    )
    coef = np.array([norm.ppf(0.45), norm.ppf(0.55) - norm.ppf(0.45)])
    raw, names = build_design(ds, PropensityDesign(include_covariates=False, include_interactions=False))
    fit = PropensityFit(
        coef=coef, se=np.zeros(2), fitted=np.zeros(3), converged=True, iterations=0,
        ridge_used=0.0, loglik=0.0,
        design=PropensityDesign(include_covariates=False, include_interactions=False),
        column_names=names, kept_columns=np.arange(2),
    )
    scores = predict_scores(fit, ds)
    assert scores[1] == pytest.approx(0.55, abs=1e-12)
    assert scores[0] == pytest.approx(0.45, abs=1e-12)


def test_rank_deficient_design_raises():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(100, 2))
    x = np.column_stack([x, x[:, 0] + x[:, 1]])  # exact collinearity
    ds = make_dataset(y=np.zeros(100), d=rng.integers(0, 2, 100), x=x, z=rng.integers(0, 2, 100))
    with pytest.raises(ProbitError, match="rank deficient"):
        fit_probit(ds, NO_INTERACT)


def test_too_few_observations_raises():
    rng = np.random.default_rng(0)
    ds = make_dataset(
        y=np.zeros(5), d=[0, 1, 0, 1, 1], x=rng.normal(size=(5, 3)), z=[0, 1, 0, 1, 0]
    )
    with pytest.raises(ProbitError, match="n > m"):
        fit_probit(ds, NO_INTERACT)


def test_constant_column_pruned():
    rng = np.random.default_rng(8)
    x = np.column_stack([rng.normal(size=200), np.full(200, 3.0)])
    ds = make_dataset(y=np.zeros(200), d=rng.integers(0, 2, 200), x=x, z=rng.integers(0, 2, 200))
    fit = fit_probit(ds, NO_INTERACT)
    assert "x1" not in fit.column_names
    assert fit.converged
