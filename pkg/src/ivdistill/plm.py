"""Partially linear outcome model and partial residuals.

The outcome satisfies E[Y | p, x] = x'theta0 + p x'(theta1 - theta0) + phi(p)
with phi unknown.  The two-step estimator regresses y - E[y|p] on
p (x - E[x|p]) and (1-p)(x - E[x|p]), with the conditional means estimated
by local-linear regression on the fitted propensity score.  A polynomial
phi(p) mode replaces the nonparametric step with a single weighted least
squares fit.  Partial residuals are u_i = y_i - x_i' theta_hat_{d_i}.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .kernelreg import fit_llr, predict
from .propensity import PropensityFit

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-10


@dataclass
class PartialLinearFit:
    theta1: np.ndarray
    theta0: np.ndarray
    phi_mode: str
    pooled: bool
    poly_coeffs: np.ndarray | None
    residual_variance: float
    dropped_directions: int
    pscore: np.ndarray
    mu_y: np.ndarray | None = None
    mu_x: np.ndarray | None = None
    bandwidths: dict = field(default_factory=dict)


@dataclass
class ResidualSet:
    """Partial residuals with the columns carried through to testing."""

    u: np.ndarray
    pscore: np.ndarray
    d: np.ndarray
    z: np.ndarray
    weight: np.ndarray
    z_levels: np.ndarray

    @property
    def n(self) -> int:
        return self.u.shape[0]


def parse_phi_mode(mode: str) -> tuple[str, int]:
    """Parse 'nonparametric' or 'poly:<degree>' (default degree 3)."""
    if mode == "nonparametric":
        return "nonparametric", 0
    if mode == "poly":
        return "poly", 3
    m = re.fullmatch(r"poly:(\d+)", mode)
    if m:
        return "poly", int(m.group(1))
    raise ValueError(f"unknown phi mode {mode!r}")


def _wls_pinv(design: np.ndarray, target: np.ndarray, w: np.ndarray):
    """Weighted least squares through a thresholded pseudo-inverse.

    Returns the coefficients and the number of singular directions dropped
    (collinear partialed designs occur when the instrument is irrelevant).
    """
    sw = np.sqrt(w)
    a = design * sw[:, None]
    b = target * sw
    u_svd, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = PINV_RCOND * s[0] if s.size else 0.0
    keep = s > cutoff
    dropped = int(np.sum(~keep))
    if dropped:
        logger.info("dropped %d collinear directions in partially linear fit", dropped)
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    coef = vt.T @ (inv_s * (u_svd.T @ b))
    return coef, dropped


def fit_plm(
    ds: Dataset,
    pfit: PropensityFit | np.ndarray,
    mode: str = "nonparametric",
    pooled: bool = False,
    bw_y: float | None = None,
    bw_x: float | None = None,
) -> PartialLinearFit:
    """Estimate the partially linear outcome model.

    Parameters
    ----------
    ds : Dataset
    pfit : PropensityFit or ndarray
        Fitted propensity object or a vector of fitted scores.
    mode : str
        'nonparametric' (local-linear partialing, per-column cross-validated
        bandwidths) or 'poly:<k>' (phi is a degree-k polynomial in p and the
        fit is one weighted least squares on the full design).
    pooled : bool
        Restrict theta1 = theta0 (the specification used when the outcome
        equation does not interact covariates with treatment).
    bw_y, bw_x : float, optional
        Bandwidth overrides for the outcome and covariate partialing fits.
    """
    p = pfit.fitted if isinstance(pfit, PropensityFit) else np.asarray(pfit, dtype=float)
    if p.shape[0] != ds.n:
        raise ValueError("propensity scores do not match the dataset")
    phi_kind, degree = parse_phi_mode(mode)
    y, x, w = ds.y, ds.x, ds.weight
    k = ds.k_x

    if phi_kind == "nonparametric":
        fit_y = fit_llr(p, y, w, bandwidth=bw_y)
        mu_y = predict(fit_y, p)
        mu_x = np.empty_like(x)
        bandwidths = {"y": fit_y.bandwidth}
        for j in range(k):
            fx = fit_llr(p, x[:, j], w, bandwidth=bw_x)
            mu_x[:, j] = predict(fx, p)
            bandwidths[f"x{j}"] = fx.bandwidth
        xc = x - mu_x
        if pooled:
            design = xc
        else:
            design = np.hstack([p[:, None] * xc, (1.0 - p)[:, None] * xc])
        target = y - mu_y
        if ds.n <= design.shape[1]:
            raise ValueError("fewer observations than parameters")
        coef, dropped = _wls_pinv(design, target, w)
        eps = target - design @ coef
        theta1 = coef[:k] if not pooled else coef
        theta0 = coef[k:] if not pooled else coef
        poly_coeffs = None
    else:
        powers = np.vander(p, degree + 1, increasing=True)  # 1, p, ..., p^degree
        if pooled:
            design = np.hstack([powers, x])
        else:
            design = np.hstack([powers, p[:, None] * x, (1.0 - p)[:, None] * x])
        if ds.n <= design.shape[1]:
            raise ValueError("fewer observations than parameters")
        coef, dropped = _wls_pinv(design, y, w)
        eps = y - design @ coef
        poly_coeffs = coef[: degree + 1]
        rest = coef[degree + 1 :]
        theta1 = rest[:k] if not pooled else rest
        theta0 = rest[k:] if not pooled else rest
        mu_y = mu_x = None
        bandwidths = {}

    rvar = float(np.average(eps**2, weights=w))
    return PartialLinearFit(
        theta1=np.array(theta1, dtype=float),
        theta0=np.array(theta0, dtype=float),
        phi_mode=mode if phi_kind == "nonparametric" else f"poly:{degree}",
        pooled=pooled,
        poly_coeffs=poly_coeffs,
        residual_variance=rvar,
        dropped_directions=dropped,
        pscore=p,
        mu_y=mu_y,
        mu_x=mu_x,
        bandwidths=bandwidths,
    )


def residuals(ds: Dataset, plfit: PartialLinearFit) -> ResidualSet:
    """Construct partial residuals u_i = y_i - x_i' theta_hat_{d_i}."""
    if plfit.pscore.shape[0] != ds.n:
        raise ValueError("fit does not match the dataset")
    fit1 = ds.x @ plfit.theta1
    fit0 = ds.x @ plfit.theta0
    u = np.where(ds.d == 1, ds.y - fit1, ds.y - fit0)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite partial residuals")
    return ResidualSet(
        u=u,
        pscore=plfit.pscore,
        d=ds.d,
        z=ds.z,
        weight=ds.weight,
        z_levels=ds.z_levels,
    )
