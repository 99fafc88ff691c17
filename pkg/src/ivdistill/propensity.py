"""Probit estimation of the propensity score Pr(D=1 | X, Z).

The default design interacts the instrument with the conditioning
covariates: intercept, instrument-level dummies, covariates, and
dummy-by-covariate interactions.  Fitting is Newton-Raphson with step
halving on the weighted log-likelihood; quasi-separated problems are
refitted with a small L2 penalty on the non-intercept coefficients so the
pipeline stays runnable on near-separated data.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .dataset import Dataset

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-6
SEPARATION_INDEX = 8.0


class ProbitError(RuntimeError):
    """Raised for unusable probit designs (rank deficiency, n <= m)."""


@dataclass(frozen=True)
class PropensityDesign:
    """Design-builder switches for the treatment probit."""

    include_instrument: bool = True
    include_covariates: bool = True
    include_interactions: bool = True


@dataclass
class PropensityFit:
    """Fitted probit coefficients and in-sample scores."""

    coef: np.ndarray
    se: np.ndarray
    fitted: np.ndarray
    converged: bool
    iterations: int
    ridge_used: float
    loglik: float
    design: PropensityDesign
    column_names: list[str]
    kept_columns: np.ndarray
    link: str = "probit"


def build_design(ds: Dataset, design: PropensityDesign) -> tuple[np.ndarray, list[str]]:
    """Assemble the raw design matrix (before degenerate-column pruning)."""
    cols = [np.ones(ds.n)]
    names = ["const"]
    if design.include_instrument:
        for lev_idx in range(1, ds.n_levels):
            cols.append((ds.z == lev_idx).astype(float))
            names.append(f"z{ds.z_levels[lev_idx]}")
    if design.include_covariates:
        for j in range(ds.k_x):
            cols.append(ds.x[:, j])
            names.append(f"x{j}")
    if design.include_interactions and design.include_instrument and design.include_covariates:
        for lev_idx in range(1, ds.n_levels):
            dummy = (ds.z == lev_idx).astype(float)
            for j in range(ds.k_x):
                cols.append(dummy * ds.x[:, j])
                names.append(f"z{ds.z_levels[lev_idx]}:x{j}")
    return np.column_stack(cols), names


def _prune_columns(mat: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Drop constant non-intercept columns; error if still rank deficient."""
    keep = [0]
    for j in range(1, mat.shape[1]):
        col = mat[:, j]
        if np.ptp(col) == 0.0:
            logger.info("dropping constant design column %s", names[j])
        else:
            keep.append(j)
    kept = np.asarray(keep, dtype=np.int64)
    pruned = mat[:, kept]
    rank = np.linalg.matrix_rank(pruned)
    if rank < pruned.shape[1]:
        raise ProbitError(
            f"design is rank deficient after pruning (rank {rank} < {pruned.shape[1]} columns)"
        )
    return pruned, [names[j] for j in kept], kept


def _probit_loglik(beta, X, y, w, ridge):
    eta = X @ beta
    ll = float(np.sum(w * (y * norm.logcdf(eta) + (1.0 - y) * norm.logcdf(-eta))))
    if ridge > 0.0:
        ll -= 0.5 * ridge * float(beta[1:] @ beta[1:])
    return ll


def _probit_score_info(beta, X, y, w, ridge):
    eta = X @ beta
    log_pdf = norm.logpdf(eta)
    mills1 = np.exp(log_pdf - norm.logcdf(eta))
    mills0 = np.exp(log_pdf - norm.logcdf(-eta))
    resid = y * mills1 - (1.0 - y) * mills0
    grad = X.T @ (w * resid)
    # Expected information; for the probit this is also the Newton curvature.
    info_w = w * mills1 * mills0
    info = (X * info_w[:, None]).T @ X
    if ridge > 0.0:
        grad = grad.copy()
        grad[1:] -= ridge * beta[1:]
        info = info + ridge * np.diag(np.r_[0.0, np.ones(beta.size - 1)])
    return grad, info


def _probit_mle(X, y, w, max_iter=100, gtol_scale=1e-9, ridge=0.0):
    """Newton-Raphson with step halving.  Returns (beta, converged, iters, ll)."""
    n_eff = float(np.sum(w))
    gtol = gtol_scale * max(1.0, n_eff)
    ybar = float(np.sum(w * y) / n_eff)
    ybar = min(max(ybar, SCORE_CLAMP), 1.0 - SCORE_CLAMP)
    beta = np.zeros(X.shape[1])
    beta[0] = norm.ppf(ybar)
    ll = _probit_loglik(beta, X, y, w, ridge)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad, info = _probit_score_info(beta, X, y, w, ridge)
        if np.max(np.abs(grad)) < gtol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(50):
            cand = beta + scale * step
            ll_new = _probit_loglik(cand, X, y, w, ridge)
            if ll_new >= ll - 1e-12 * abs(ll):
                beta, ll = cand, ll_new
                break
            scale *= 0.5
        else:
            break  # no improving step along the Newton direction
    else:
        it = max_iter
    if not converged:
        grad, _ = _probit_score_info(beta, X, y, w, ridge)
        converged = bool(np.max(np.abs(grad)) < gtol)
    return beta, converged, it, ll


def fit_probit(
    ds: Dataset,
    design: PropensityDesign = PropensityDesign(),
    max_iter: int = 100,
    ridge: float = 1e-4,
    link: str = "probit",
) -> PropensityFit:
    """Fit the treatment probit by maximum likelihood.

    On quasi-separation (any fitted linear index beyond +/-8, or failure to
    converge) the model is refitted with an L2 penalty ``ridge`` on the
    non-intercept coefficients and ``ridge_used`` is set on the result.
    """
    if link != "probit":
        raise ValueError(f"unsupported link {link!r}; only 'probit' is implemented")
    raw, raw_names = build_design(ds, design)
    X, names, kept = _prune_columns(raw, raw_names)
    m = X.shape[1]
    if ds.n <= m:
        raise ProbitError(f"need n > m; got n={ds.n}, m={m}")
    y = ds.d.astype(float)
    w = ds.weight

    beta, converged, iters, ll = _probit_mle(X, y, w, max_iter=max_iter)
    ridge_used = 0.0
    eta = X @ beta
    if (not converged) or np.max(np.abs(eta)) > SEPARATION_INDEX:
        warnings.warn(
            "quasi-separation detected in propensity probit; refitting with "
            f"L2 penalty {ridge:g} on non-intercept coefficients"
        )
        beta, converged, iters, ll = _probit_mle(X, y, w, max_iter=max_iter, ridge=ridge)
        ridge_used = ridge
        eta = X @ beta

    _, info = _probit_score_info(beta, X, y, w, ridge_used)
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(m, np.nan)

    fitted = np.clip(norm.cdf(eta), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return PropensityFit(
        coef=beta,
        se=se,
        fitted=fitted,
        converged=converged,
        iterations=iters,
        ridge_used=ridge_used,
        loglik=ll,
        design=design,
        column_names=names,
        kept_columns=kept,
        link=link,
    )


def predict_scores(fit: PropensityFit, ds: Dataset) -> np.ndarray:
    """Evaluate fitted scores Phi(x'beta) on a dataset, clamped away from {0, 1}."""
    raw, _ = build_design(ds, fit.design)
    if raw.shape[1] <= fit.kept_columns.max():
        raise ValueError("dataset is incompatible with the fitted design")
    X = raw[:, fit.kept_columns]
    if X.shape[1] != fit.coef.shape[0]:
        raise ValueError(
            f"design has {X.shape[1]} columns but fit has {fit.coef.shape[0]} coefficients"
        )
    return np.clip(norm.cdf(X @ fit.coef), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
