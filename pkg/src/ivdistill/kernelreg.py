"""Weighted univariate kernel regression with cross-validated bandwidths.

Local-linear and local-constant (Nadaraya-Watson) estimators with a
Gaussian kernel.  Bandwidths minimize the weighted leave-one-out squared
error over a log-spaced grid of 25 points spanning
``[0.1 * h_rot, 10 * h_rot]`` around the rule-of-thumb bandwidth
``h_rot = 1.06 * sd(p) * n**(-1/5)``.

Local-linear fits fall back to the local-constant estimator at query
points where the local design is singular (all kernel weight concentrated
on one predictor value), which is routine when propensity scores have mass
points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID_POINTS = 25
GRID_SPAN = 10.0
_CHUNK = 1024
# Relative threshold on the local slope denominator before the NW fallback.
_SINGULAR_REL = 1e-12


@dataclass
class KernelFit:
    """A fitted univariate kernel regression.

    Attributes
    ----------
    method : str
        "local_linear" or "local_constant".
    bandwidth : float
        Selected (or user-supplied) bandwidth, > 0.
    cv_score : float
        Weighted leave-one-out squared error at ``bandwidth`` (NaN when the
        bandwidth was supplied directly).
    cv_grid : ndarray or None
        (n_grid, 2) array of candidate bandwidths and their CV scores.
    """

    method: str
    bandwidth: float
    cv_score: float
    cv_grid: np.ndarray | None
    p: np.ndarray
    v: np.ndarray
    w: np.ndarray


def rule_of_thumb_bandwidth(p: np.ndarray, w: np.ndarray | None = None) -> float:
    p = np.asarray(p, dtype=float)
    w = np.ones_like(p) if w is None else np.asarray(w, dtype=float)
    mean = np.average(p, weights=w)
    var = np.average((p - mean) ** 2, weights=w)
    return 1.06 * np.sqrt(var) * p.size ** (-0.2)


def _as_arrays(p, v, w):
    p = np.asarray(p, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    w = np.ones_like(p) if w is None else np.asarray(w, dtype=float).ravel()
    if not (p.shape == v.shape == w.shape):
        raise ValueError("p, v, w must have equal length")
    return p, v, w


def _bandwidth_grid(p, w, grid):
    if grid is not None:
        arr = np.asarray(grid, dtype=float).ravel()
        if np.any(arr <= 0):
            raise ValueError("bandwidth grid must be positive")
        return np.sort(arr)
    h_rot = rule_of_thumb_bandwidth(p, w)
    return np.geomspace(h_rot / GRID_SPAN, h_rot * GRID_SPAN, GRID_POINTS)


def _local_sums(p_query, fit: KernelFit, loo=False):
    """Accumulate the kernel-weighted moment sums used by both estimators.

    Returns S0, S1, S2, T0, T1 at each query point; with ``loo`` the
    query points are the training points and self-contributions are
    removed (only S0 and T0 carry a self term at the training point).
    """
    p, v, w, h = fit.p, fit.v, fit.w, fit.bandwidth
    n_q = p_query.size
    out = [np.empty(n_q) for _ in range(5)]
    for lo in range(0, n_q, _CHUNK):
        hi = min(lo + _CHUNK, n_q)
        diff = p[None, :] - p_query[lo:hi, None]
        omega = w[None, :] * np.exp(-0.5 * (diff / h) ** 2)
        out[0][lo:hi] = omega.sum(axis=1)
        od = omega * diff
        out[1][lo:hi] = od.sum(axis=1)
        out[2][lo:hi] = (od * diff).sum(axis=1)
        out[3][lo:hi] = (omega * v[None, :]).sum(axis=1)
        out[4][lo:hi] = (od * v[None, :]).sum(axis=1)
    s0, s1, s2, t0, t1 = out
    if loo:
        s0 = s0 - w  # kernel weight at zero distance is 1
        t0 = t0 - w * v
    return s0, s1, s2, t0, t1


def _evaluate(s0, s1, s2, t0, t1, method, p_query, fit):
    if method == "local_constant":
        pred = np.divide(t0, s0, out=np.full_like(t0, np.nan), where=s0 > 0)
    else:
        den = s0 * s2 - s1 * s1
        num = s2 * t0 - s1 * t1
        scale = np.maximum(s0 * s2, np.abs(den))
        ok = den > _SINGULAR_REL * np.maximum(scale, 1e-300)
        pred = np.divide(num, den, out=np.full(den.shape, np.nan), where=ok)
        nw = np.divide(t0, s0, out=np.full_like(t0, np.nan), where=s0 > 0)
        pred = np.where(ok, pred, nw)
    # Underflowed kernel mass: fall back to the nearest training value.
    bad = ~np.isfinite(pred)
    if np.any(bad):
        order = np.argsort(fit.p, kind="stable")
        pos = np.clip(np.searchsorted(fit.p[order], p_query[bad]), 0, fit.p.size - 1)
        left = np.clip(pos - 1, 0, fit.p.size - 1)
        use_left = np.abs(fit.p[order][left] - p_query[bad]) <= np.abs(
            fit.p[order][pos] - p_query[bad]
        )
        pred[bad] = fit.v[order][np.where(use_left, left, pos)]
    return pred


def _cv_score(p, v, w, h, method):
    fit = KernelFit(method, h, np.nan, None, p, v, w)
    s0, s1, s2, t0, t1 = _local_sums(p, fit, loo=True)
    pred = _evaluate(s0, s1, s2, t0, t1, method, p, fit)
    if not np.all(np.isfinite(pred)):
        return np.inf
    return float(np.average((v - pred) ** 2, weights=w))


def _fit(p, v, w, grid, bandwidth, method):
    p, v, w = _as_arrays(p, v, w)
    if np.ptp(p) == 0.0:
        if method == "local_constant":
            # Degenerate but well defined: the estimator is the weighted mean.
            return KernelFit(method, 1.0, 0.0, None, p, v, w)
        raise ValueError("predictor has zero variance")
    if bandwidth is not None:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        return KernelFit(method, float(bandwidth), np.nan, None, p, v, w)
    if p.size < 5:
        raise ValueError("need at least 5 observations for cross-validation")
    hs = _bandwidth_grid(p, w, grid)
    scores = np.array([_cv_score(p, v, w, h, method) for h in hs])
    best = int(np.argmin(scores))
    if not np.isfinite(scores[best]):
        raise ValueError("cross-validation failed at every bandwidth")
    return KernelFit(method, float(hs[best]), float(scores[best]), np.column_stack([hs, scores]), p, v, w)


def fit_llr(p, v, w=None, grid=None, bandwidth=None) -> KernelFit:
    """Fit a weighted local-linear regression of v on p.

    Parameters
    ----------
    p, v : array_like, shape (n,)
        Predictor and response.
    w : array_like, optional
        Positive observation weights.
    grid : array_like, optional
        Explicit bandwidth grid; defaults to 25 log-spaced points around
        the rule-of-thumb bandwidth.
    bandwidth : float, optional
        Skip cross-validation and use this bandwidth.
    """
    return _fit(p, v, w, grid, bandwidth, "local_linear")


def fit_lcr(p, v, w=None, grid=None, bandwidth=None) -> KernelFit:
    """Fit a weighted local-constant (Nadaraya-Watson) regression of v on p."""
    return _fit(p, v, w, grid, bandwidth, "local_constant")


def predict(fit: KernelFit, at) -> np.ndarray:
    """Evaluate a fitted kernel regression at the requested points."""
    p_query = np.asarray(at, dtype=float).ravel()
    if np.ptp(fit.p) == 0.0 and fit.method == "local_constant":
        return np.full(p_query.shape, np.average(fit.v, weights=fit.w))
    sums = _local_sums(p_query, fit)
    return _evaluate(*sums, fit.method, p_query, fit)
