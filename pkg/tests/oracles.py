"""Independent reference implementations used to verify the library.

Everything here is deliberately naive: direct summation over interval
masks, exhaustive subset search over trim candidates, and direct matrix
quadrature.  These paths share no arithmetic with the library routines
they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import norm


# ---------------------------------------------------------------------------
# Interval statistic by direct summation


def _wmean(values, weights, mask):
    if not mask.any():
        return 0.0
    return float(np.sum(values[mask] * weights[mask]) / np.sum(weights[mask]))


def brute_force_components(u, d, z01, w, s1, xi, lam_pair=None, s2=None, pz1=None,
                           lam_global=None, endpoints=None):
    """All interval values of the nesting and index statistics by direct sums.

    Returns dict with 'endpoints' and, per component, the (m, m) value
    matrix (NaN below the diagonal) and the supremum.
    """
    u = np.asarray(u, float)
    d = np.asarray(d)
    z01 = np.asarray(z01)
    w = np.asarray(w, float)
    s1 = np.asarray(s1)
    if endpoints is None:
        endpoints = np.unique(u)
    m = endpoints.size
    lo_mask = z01 == 0
    hi_mask = ~lo_mask
    w_lo, w_hi = w[lo_mask].sum(), w[hi_mask].sum()
    n = u.size
    n0e = n * w_lo / (w_lo + w_hi)
    n1e = n * w_hi / (w_lo + w_hi)
    scale = math.sqrt(n1e * n0e / (n1e + n0e))
    if lam_pair is None:
        lam_pair = w_hi / (w_lo + w_hi)

    share1_lo = _wmean(s1.astype(float), w, lo_mask)
    share1_hi = _wmean(s1.astype(float), w, hi_mask)

    have_index = s2 is not None
    if have_index:
        s2 = np.asarray(s2)
        pz1 = np.asarray(pz1, float)
        lam_lo, lam_hi = lam_global
        share2_lo = _wmean(s2.astype(float), w, lo_mask)
        share2_hi = _wmean(s2.astype(float), w, hi_mask)

    nest = {0: np.full((m, m), np.nan), 1: np.full((m, m), np.nan)}
    idx = {0: np.full((m, m), np.nan), 1: np.full((m, m), np.nan)}
    sig1 = {0: np.full((m, m), np.nan), 1: np.full((m, m), np.nan)}
    sig2 = {0: np.full((m, m), np.nan), 1: np.full((m, m), np.nan)}
    for a in range(m):
        for b in range(a, m):
            in_int = (u >= endpoints[a]) & (u <= endpoints[b])
            for dd in (0, 1):
                f_val = (in_int & (d == dd)).astype(float) * s1
                q_mean = _wmean(f_val / share1_lo, w, lo_mask)
                p_mean = _wmean(f_val / share1_hi, w, hi_mask)
                q_var = _wmean((f_val / share1_lo) ** 2, w, lo_mask) - q_mean**2
                p_var = _wmean((f_val / share1_hi) ** 2, w, hi_mask) - p_mean**2
                if dd == 1:
                    t1 = scale * (q_mean - p_mean)
                else:
                    t1 = scale * (p_mean - q_mean)
                sd = math.sqrt(max(lam_pair * q_var + (1 - lam_pair) * p_var, 0.0))
                nest[dd][a, b] = t1 / max(sd, xi)
                sig1[dd][a, b] = sd
                if have_index:
                    g_lo_val = (in_int & (d == dd)).astype(float) * s2 * lam_lo / np.where(pz1 < 1, 1 - pz1, np.inf)
                    g_hi_val = (in_int & (d == dd)).astype(float) * s2 * lam_hi / np.where(pz1 > 0, pz1, np.inf)
                    qg = _wmean(g_lo_val / share2_lo, w, lo_mask)
                    pg = _wmean(g_hi_val / share2_hi, w, hi_mask)
                    qg_var = _wmean((g_lo_val / share2_lo) ** 2, w, lo_mask) - qg**2
                    pg_var = _wmean((g_hi_val / share2_hi) ** 2, w, hi_mask) - pg**2
                    t2 = scale * (qg - pg)
                    sd2 = math.sqrt(max(lam_pair * qg_var + (1 - lam_pair) * pg_var, 0.0))
                    idx[dd][a, b] = t2 / max(sd2, xi)
                    sig2[dd][a, b] = sd2

    out = {
        "endpoints": endpoints,
        "nesting": nest,
        "sup_nesting": float(np.nanmax([np.nanmax(nest[0]), np.nanmax(nest[1])])),
    }
    if have_index:
        sup_plus = float(np.nanmax([np.nanmax(idx[0]), np.nanmax(idx[1])]))
        sup_minus = float(np.nanmax([np.nanmax(-idx[0]), np.nanmax(-idx[1])]))
        out.update(index=idx, sup_index_plus=sup_plus, sup_index_minus=sup_minus)
    return out


# ---------------------------------------------------------------------------
# Distillation oracles


def pretrim_reference(p, z):
    """Literal iterative application of the two pre-trim rules."""
    p = np.asarray(p, float)
    z = np.asarray(z)
    keep = np.ones(p.size, dtype=bool)
    changed = True
    while changed:
        changed = False
        kept0 = keep & (z == 0)
        kept1 = keep & (z == 1)
        if not kept0.any() or not kept1.any():
            break
        min0, max1 = p[kept0].min(), p[kept1].max()
        for i in range(p.size):
            if keep[i] and z[i] == 1 and p[i] < min0:
                keep[i] = False
                changed = True
            if keep[i] and z[i] == 0 and p[i] > max1:
                keep[i] = False
                changed = True
    return keep


def fosd_holds(p, z, w, keep):
    """Dominance of the retained high-level score CDF below the low-level one."""
    order = np.lexsort((np.arange(p.size), z, p))
    ps, zs, ws, ks = p[order], z[order], w[order], keep[order]
    w1 = np.sum(ws * ks * (zs == 1))
    w0 = np.sum(ws * ks * (zs == 0))
    if w1 <= 0 or w0 <= 0:
        return False
    c1 = c0 = 0.0
    for i in range(ps.size):
        if ks[i]:
            if zs[i] == 1:
                c1 += ws[i]
            else:
                c0 += ws[i]
        if c1 / w1 > c0 / w0 + 1e-10:
            return False
    return True


def exhaustive_trims(p, z, w=None, pminus=None, pplus=None):
    """All feasible (trim1, trim0) count pairs by exhaustive subset search.

    Only high-level observations in P- and low-level observations in P+ may
    be trimmed (the retention rule).  Returns a dict mapping (t1, t0) to
    True for every feasible pair, plus the minimal total.
    """
    p = np.asarray(p, float)
    z = np.asarray(z)
    w = np.ones_like(p) if w is None else np.asarray(w, float)
    if pminus is None:
        order = np.argsort(p, kind="stable")
        cum = np.cumsum(w[order])
        med = p[order][min(int(np.searchsorted(cum, 0.5 * cum[-1])), p.size - 1)]
        in_minus = p <= med
        in_plus = ~in_minus
    else:
        in_minus = (p >= pminus[0]) & (p <= pminus[1])
        in_plus = (p >= pplus[0]) & (p <= pplus[1])
    cand1 = np.nonzero((z == 1) & in_minus)[0]
    cand0 = np.nonzero((z == 0) & in_plus)[0]
    feasible = {}
    best = None
    for r1 in range(len(cand1) + 1):
        for sub1 in itertools.combinations(cand1, r1):
            for r0 in range(len(cand0) + 1):
                for sub0 in itertools.combinations(cand0, r0):
                    keep = np.ones(p.size, dtype=bool)
                    keep[list(sub1)] = False
                    keep[list(sub0)] = False
                    if fosd_holds(p, z, w, keep):
                        feasible[(r1, r0)] = True
                        total = r1 + r0
                        if best is None or total < best:
                            best = total
    return {"feasible": feasible, "min_total": best}


# ---------------------------------------------------------------------------
# Direct matrix route for the example-process bias


def direct_bias_route(params, k=3, n_nodes=600):
    """Bias scalar products via explicit matrices and quadrature.

    Builds the stacked second-moment matrix and the instrument cross moment
    entry by entry from their defining integrals, inverts the full 2k x 2k
    system numerically, and reads off the scalar products.  Shares no
    algebra with the block-reduction route in the library.
    """
    d1, d0 = params.delta_vectors(k)
    a, dd = params.alpha, params.dd
    span = a + 10.0 * math.sqrt(dd)
    xs, ws = np.polynomial.legendre.leggauss(n_nodes)
    t = 0.5 * 2 * span * xs
    wq = span * ws
    sd = math.sqrt(dd)
    f_t = 0.5 * (norm.pdf(t, a, sd) + norm.pdf(t, -a, sd))
    q = 0.5 + 0.5 * np.tanh(a * t / dd)
    p = norm.cdf(t)

    eye = np.eye(k)
    v = d1[None, :] * (t[:, None] - a) - d0[None, :] * (t[:, None] + a)  # (nodes, k)
    cov_low = np.einsum("ni,nj->nij", v, v) / dd**2 * (q * (1 - q))[:, None, None]
    base = (
        eye[None, :, :]
        - q[:, None, None] * np.outer(d1, d1)[None] / dd
        - (1 - q)[:, None, None] * np.outer(d0, d0)[None] / dd
        + cov_low
    )

    def moment(scalars):
        return np.einsum("n,nij->ij", scalars * f_t * wq, base)

    psi1 = moment(p * p)
    psi2 = moment(p * (1 - p))
    psi3 = moment((1 - p) * (1 - p))
    exx = np.block([[psi1, psi2], [psi2, psi3]])

    exz_top = np.einsum("n,ni->i", p * q * (1 - q) * f_t * wq, v) / dd
    exz_bot = np.einsum("n,ni->i", (1 - p) * q * (1 - q) * f_t * wq, v) / dd
    exz = np.concatenate([exz_top, exz_bot])

    tilde = -np.linalg.solve(exx, exz) * 2.0 * params.nu
    b1, b0 = tilde[:k], tilde[k:]
    omega = np.linalg.inv(exx)
    o1, o2, o3 = omega[:k, :k], omega[:k, k:], omega[k:, k:]
    return {
        "t1d1": float(d1 @ b1),
        "t1d0": float(d0 @ b1),
        "t0d1": float(d1 @ b0),
        "t0d0": float(d0 @ b0),
        "tt1": float(b1 @ b1),
        "tt0": float(b0 @ b0),
        "omega_products": {
            ("d1", 1, "d1"): float(d1 @ o1 @ d1),
            ("d0", 1, "d0"): float(d0 @ o1 @ d0),
            ("d0", 1, "d1"): float(d0 @ o1 @ d1),
            ("d1", 1, "d0"): float(d1 @ o1 @ d0),
            ("d1", 2, "d1"): float(d1 @ o2 @ d1),
            ("d1", 2, "d0"): float(d1 @ o2 @ d0),
            ("d0", 2, "d1"): float(d0 @ o2 @ d1),
            ("d0", 2, "d0"): float(d0 @ o2 @ d0),
            ("d1", "2T", "d1"): float(d1 @ o2.T @ d1),
            ("d1", "2T", "d0"): float(d1 @ o2.T @ d0),
            ("d0", "2T", "d1"): float(d0 @ o2.T @ d1),
            ("d0", "2T", "d0"): float(d0 @ o2.T @ d0),
            ("d1", 3, "d1"): float(d1 @ o3 @ d1),
            ("d1", 3, "d0"): float(d1 @ o3 @ d0),
            ("d0", 3, "d1"): float(d0 @ o3 @ d1),
            ("d0", 3, "d0"): float(d0 @ o3 @ d0),
        },
    }
