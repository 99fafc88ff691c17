"""Sample distillation: trimming to restore first-order stochastic dominance.

Given a two-level instrument, the conditional propensity-score distribution
for the high level must first-order stochastically dominate the one for the
low level before nesting inequalities can be tested instrument-value by
instrument-value.  The routines here construct an inclusion indicator s1
that enforces that dominance while retaining every low-level observation in
the lower score region P- and every high-level observation in the upper
region P+ (so only uninformative observations are discarded).

Two algorithms are provided.  The simple one determines the number of
high-level observations to trim from P- first and the number of low-level
observations to trim from P+ afterwards; the modified one jointly minimizes
the total number of trims through a pair of reaction functions.

All counts are weight sums.  With unit weights the per-index trim
requirements are rounded up to integers; with general weights the raw
requirements are used and the trimming loops remove whole observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TOL = 1e-12
_CEIL_FUZZ = 1e-9
_MAX_PASSES = 8


class DistillationInfeasibleError(RuntimeError):
    """Raised when no valid trimmed sample exists (e.g. one side empties)."""


@dataclass(frozen=True)
class SortedPair:
    """A two-level subsample sorted ascending by propensity score.

    Ties are broken by placing z=0 observations before z=1 observations
    (and by original position after that, for determinism).  ``idx`` maps
    sorted positions back to positions in the arrays supplied at
    construction; ``orig_n`` is the length of those arrays.
    """

    p: np.ndarray
    z: np.ndarray
    w: np.ndarray
    idx: np.ndarray
    orig_n: int

    @property
    def size(self) -> int:
        return self.p.shape[0]

    @property
    def n0(self) -> float:
        return float(self.w[self.z == 0].sum())

    @property
    def n1(self) -> float:
        return float(self.w[self.z == 1].sum())

    def subset(self, keep_sorted_positions: np.ndarray) -> "SortedPair":
        k = np.asarray(keep_sorted_positions)
        return SortedPair(self.p[k], self.z[k], self.w[k], self.idx[k], self.orig_n)


@dataclass
class DistilledSample:
    """Inclusion flags plus the audit record of a distillation run.

    ``s1`` is aligned with the arrays the pair was constructed from;
    positions dropped in pre-trimming or lying outside P- and P+ are 0.
    ``d0``/``d1`` are the trim requirements computed by the algorithm and
    ``trimmed_z0``/``trimmed_z1`` the realized weighted trims (pre-trim
    drops excluded).  ``j_minus``/``j_plus`` are 0-based positions in the
    sorted pretrimmed sample, or None when no trimming was needed.
    """

    s1: np.ndarray
    algorithm: str
    d0: float
    d1: float
    j_minus: int | None
    j_plus: int | None
    pminus_spec: tuple[float, float]
    pplus_spec: tuple[float, float]
    trimmed_z0: float
    trimmed_z1: float
    pretrim_dropped: int
    outside_regions: int
    passes: int


def make_sorted_pair(p, z, w=None, idx=None) -> SortedPair:
    """Build a :class:`SortedPair` from score, binary level, and weights."""
    p = np.asarray(p, dtype=float).ravel()
    z = np.asarray(z).ravel().astype(np.int8)
    if not np.all(np.isin(z, (0, 1))):
        raise ValueError("pair level must be binary 0/1")
    w = np.ones_like(p) if w is None else np.asarray(w, dtype=float).ravel()
    if not (p.shape == z.shape == w.shape):
        raise ValueError("p, z, w must have equal length")
    if np.any(w <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("weights must be positive and scores finite")
    base = np.arange(p.size) if idx is None else np.asarray(idx)
    order = np.lexsort((base, z, p))
    return SortedPair(p[order], z[order], w[order], base[order], p.size)


def pretrim(pair: SortedPair) -> SortedPair:
    """Drop observations that no trimmed sample could retain.

    High-level observations below the lowest low-level score, and low-level
    observations above the highest high-level score, cannot appear in any
    sample satisfying the dominance constraints.  The two rules are applied
    until stable.
    """
    keep = np.ones(pair.size, dtype=bool)
    p, z = pair.p, pair.z
    while True:
        kept0 = keep & (z == 0)
        kept1 = keep & (z == 1)
        if not kept0.any() or not kept1.any():
            raise DistillationInfeasibleError(
                "pre-trimming exhausted one instrument level entirely"
            )
        min0 = p[kept0].min()
        max1 = p[kept1].max()
        drop = (kept1 & (p < min0)) | (kept0 & (p > max1))
        if not drop.any():
            break
        keep &= ~drop
    if keep.all():
        return pair
    return pair.subset(np.nonzero(keep)[0])


def _prefix(pair: SortedPair):
    cum1 = np.cumsum(pair.w * (pair.z == 1))
    cum0 = np.cumsum(pair.w * (pair.z == 0))
    return cum1, cum0


def delta_profile(pair: SortedPair) -> np.ndarray:
    """The gap between the two conditional score CDFs at every sorted index."""
    cum1, cum0 = _prefix(pair)
    return cum1 / pair.n1 - cum0 / pair.n0


def delta(pair: SortedPair, j: int) -> float:
    """CDF gap at 1-based sorted index j (j = N gives 0: both CDFs reach 1)."""
    if not 1 <= j <= pair.size:
        raise IndexError(f"j must be in 1..{pair.size}")
    return float(delta_profile(pair)[j - 1])


def _weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    pos = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(values[order][min(pos, values.size - 1)])


def default_regions(pair: SortedPair) -> tuple[tuple[float, float], tuple[float, float]]:
    """Median split: P- is at-or-below the weighted median score, P+ above."""
    med = _weighted_median(pair.p, pair.w)
    return (-math.inf, med), (math.nextafter(med, math.inf), math.inf)


def _resolve_regions(pair, pminus, pplus):
    if pminus is None and pplus is None:
        return default_regions(pair)
    if pminus is None or pplus is None:
        raise ValueError("supply both pminus and pplus or neither")
    pminus = (float(pminus[0]), float(pminus[1]))
    pplus = (float(pplus[0]), float(pplus[1]))
    if not (pminus[0] <= pminus[1] and pplus[0] <= pplus[1]):
        raise ValueError("regions must be nonempty intervals")
    if pplus[0] <= pminus[1]:
        raise ValueError("P+ must lie strictly above P-")
    return pminus, pplus


def _region_masks(pair, pminus, pplus):
    in_minus = (pair.p >= pminus[0]) & (pair.p <= pminus[1])
    in_plus = (pair.p >= pplus[0]) & (pair.p <= pplus[1])
    return in_minus, in_plus


def _is_unit(w):
    return bool(np.all(w == 1.0))


def _ceil(v):
    return math.ceil(v - _CEIL_FUZZ * max(1.0, abs(v)))


def _d1_requirements(pair, mask_minus, d0):
    """Per-index trim requirement for high-level observations in P-.

    ``d0`` low-level observations are assumed trimmed above the index.
    Indices where the remaining low-level mass at or below them already
    reaches the (trimmed) total carry no constraint.
    """
    cum1, cum0 = _prefix(pair)
    n0, n1 = pair.n0, pair.n1
    den = n0 - d0 - cum0
    dprof = cum1 / n1 - cum0 / n0
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = n1 * (n0 - d0) / den * (dprof - d0 * cum0 / ((n0 - d0) * n0))
    vals = np.where(mask_minus & (den > _TOL), vals, -np.inf)
    return vals


def _d0_requirements(pair, mask_plus, d1):
    """Per-index trim requirement for low-level observations in P+."""
    cum1, cum0 = _prefix(pair)
    n0, n1 = pair.n0, pair.n1
    den = cum1 - d1
    dprof = cum1 / n1 - cum0 / n0
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = n0 * (n1 - d1) / den * (dprof - d1 * (n1 - cum1) / ((n1 - d1) * n1))
    vals = np.where(mask_plus & (den > _TOL), vals, -np.inf)
    return vals


def _max_and_round(vals, unit):
    if not np.any(np.isfinite(vals)):
        return 0.0, None
    raw = float(np.max(vals))
    if raw <= _TOL:
        return 0.0, None
    req = float(_ceil(raw)) if unit else raw
    return req, raw


def reaction_d1(pair: SortedPair, d0: float, pminus=None, pplus=None) -> float:
    """Required high-level trims in P- given ``d0`` low-level trims in P+."""
    pminus, pplus = _resolve_regions(pair, pminus, pplus)
    mask_minus, _ = _region_masks(pair, pminus, pplus)
    req, _ = _max_and_round(_d1_requirements(pair, mask_minus, d0), _is_unit(pair.w))
    return req


def reaction_d0(pair: SortedPair, d1: float, pminus=None, pplus=None) -> float:
    """Required low-level trims in P+ given ``d1`` high-level trims in P-."""
    pminus, pplus = _resolve_regions(pair, pminus, pplus)
    _, mask_plus = _region_masks(pair, pminus, pplus)
    req, _ = _max_and_round(_d0_requirements(pair, mask_plus, d1), _is_unit(pair.w))
    return req


def _argmax_low(vals):
    return int(np.argmax(vals))  # first position attaining the max


def _argmax_high(vals):
    flipped = vals[::-1]
    return int(vals.size - 1 - np.argmax(flipped))  # last position attaining the max


def _trim_low_region(pair, keep, j_minus, d1, denom0):
    """Scan upward through P-; trim a high-level observation whenever keeping
    it would push the trimmed high-level CDF above the low-level CDF."""
    n1 = pair.n1
    if n1 - d1 <= _TOL:
        raise DistillationInfeasibleError("trim requirement exhausts the high level")
    cum0 = np.cumsum(pair.w * (pair.z == 0))
    run = 0.0
    for j in range(j_minus + 1):
        if pair.z[j] == 1:
            cand = run + pair.w[j]
            if cand / (n1 - d1) - cum0[j] / denom0 > _TOL:
                keep[j] = False
            else:
                run = cand
        # low-level observations in P- are always retained


def _trim_high_region(pair, keep, j_plus, d0, d1):
    """Scan downward through P+; trim a low-level observation whenever keeping
    it would push the trimmed low-level upper tail above the high-level one."""
    n0, n1 = pair.n0, pair.n1
    if n0 - d0 <= _TOL:
        raise DistillationInfeasibleError("trim requirement exhausts the low level")
    tail1 = np.cumsum((pair.w * (pair.z == 1))[::-1])[::-1]
    run = 0.0
    for j in range(pair.size - 1, j_plus, -1):
        if pair.z[j] == 0:
            cand = run + pair.w[j]
            if cand / (n0 - d0) - tail1[j] / (n1 - d1) > _TOL:
                keep[j] = False
            else:
                run = cand


def _candidate_pairs(pair, mask_minus, mask_plus, unit):
    """Trim-count candidates for the modified algorithm: the two corner
    solutions plus the points along the reaction curves."""

    def r1(d0):
        req, _ = _max_and_round(_d1_requirements(pair, mask_minus, d0), unit)
        return req

    def r0(d1):
        req, _ = _max_and_round(_d0_requirements(pair, mask_plus, d1), unit)
        return req

    d1_max = r1(0.0)
    d0_max = r0(0.0)
    d1_min = max(r1(d0_max), 0.0)
    d0_min = max(r0(d1_max), 0.0)
    cands = {(d1_max, d0_min), (d1_min, d0_max)}
    if unit:
        for d1 in range(int(d1_min), int(d1_max) + 1):
            d0 = r0(float(d1))
            if d1 >= r1(d0):
                cands.add((float(d1), d0))
    else:
        for d1_start in (d1_min, d1_max):
            d1 = d1_start
            for _ in range(64):
                d0 = r0(d1)
                d1_new = r1(d0)
                if abs(d1_new - d1) <= 1e-10 * max(1.0, d1):
                    break
                d1 = d1_new
            if d1 >= r1(r0(d1)) - 1e-10:
                cands.add((d1, r0(d1)))
    feasible = [c for c in cands if c[0] < pair.n1 - _TOL and c[1] < pair.n0 - _TOL]
    if not feasible:
        raise DistillationInfeasibleError("every trim-count candidate exhausts a level")
    return min(feasible, key=lambda c: (c[0] + c[1], c[0]))


def _check_pretrimmed(pair):
    if pair.size < 2 or pair.n0 <= 0 or pair.n1 <= 0:
        raise DistillationInfeasibleError("pair must contain both levels")
    if pair.z[0] != 0 or pair.z[-1] != 1:
        raise ValueError("pair is not pretrimmed (apply pretrim first)")


def _run_algorithm(pair, pminus, pplus, modified):
    mask_minus, mask_plus = _region_masks(pair, pminus, pplus)
    if not np.all(mask_minus | mask_plus):
        raise ValueError("pair contains observations outside P- and P+")
    keep = np.ones(pair.size, dtype=bool)
    dprof = delta_profile(pair)
    if float(dprof.max()) <= _TOL:
        return keep, 0.0, 0.0, None, None
    unit = _is_unit(pair.w)

    if modified:
        d1, d0 = _candidate_pairs(pair, mask_minus, mask_plus, unit)
        vals1 = _d1_requirements(pair, mask_minus, d0)
        vals0 = _d0_requirements(pair, mask_plus, d1)
        j_minus = _argmax_low(vals1) if d1 > 0 else None
        j_plus = _argmax_high(vals0) if d0 > 0 else None
        if d1 > 0:
            _trim_low_region(pair, keep, j_minus, d1, pair.n0 - d0)
        if d0 > 0:
            _trim_high_region(pair, keep, j_plus, d0, d1)
    else:
        vals1 = _d1_requirements(pair, mask_minus, 0.0)
        if unit:
            with np.errstate(invalid="ignore"):
                vals1 = np.where(np.isfinite(vals1), np.ceil(vals1 - _CEIL_FUZZ), vals1)
        d1, raw1 = _max_and_round(vals1, unit=False)
        if unit and d1 > 0:
            d1 = float(_ceil(d1))
        j_minus = _argmax_low(vals1) if raw1 is not None else None
        if d1 >= pair.n1 - _TOL:
            raise DistillationInfeasibleError("trim requirement exhausts the high level")
        if d1 > 0:
            _trim_low_region(pair, keep, j_minus, d1, pair.n0)
        vals0 = _d0_requirements(pair, mask_plus, d1)
        if unit:
            with np.errstate(invalid="ignore"):
                vals0 = np.where(np.isfinite(vals0), np.ceil(vals0 - _CEIL_FUZZ), vals0)
        d0, raw0 = _max_and_round(vals0, unit=False)
        if unit and d0 > 0:
            d0 = float(_ceil(d0))
        j_plus = _argmax_high(vals0) if raw0 is not None else None
        if d0 >= pair.n0 - _TOL:
            raise DistillationInfeasibleError("trim requirement exhausts the low level")
        if d0 > 0:
            _trim_high_region(pair, keep, j_plus, d0, d1)

    return keep, d0, d1, j_minus, j_plus


def _distill(pair: SortedPair, pminus, pplus, modified: bool, pretrim_dropped: int,
             outside: int, algorithm: str) -> DistilledSample:
    _check_pretrimmed(pair)
    pminus, pplus = _resolve_regions(pair, pminus, pplus)
    current = pair
    s1 = np.zeros(pair.orig_n, dtype=np.int8)
    total_d0 = total_d1 = 0.0
    j_minus = j_plus = None
    passes = 0
    # A single pass guarantees dominance for unit weights; with general
    # weights whole-observation trims can overshoot the computed counts, so
    # repeat on the retained subsample until the constraint verifies.
    for passes in range(1, _MAX_PASSES + 1):
        keep, d0, d1, jm, jp = _run_algorithm(current, pminus, pplus, modified)
        if passes == 1:
            total_d0, total_d1, j_minus, j_plus = d0, d1, jm, jp
        retained = current.subset(np.nonzero(keep)[0])
        if retained.size == 0 or retained.n0 <= 0 or retained.n1 <= 0:
            raise DistillationInfeasibleError("distillation exhausted one instrument level")
        ok, _ = _fosd_check(retained)
        if ok:
            current = retained
            break
        current = retained
    else:
        raise DistillationInfeasibleError("dominance not attained after repeated passes")
    s1[current.idx] = 1
    w1 = pair.w[pair.z == 1].sum() - current.w[current.z == 1].sum()
    w0 = pair.w[pair.z == 0].sum() - current.w[current.z == 0].sum()
    return DistilledSample(
        s1=s1,
        algorithm=algorithm,
        d0=total_d0,
        d1=total_d1,
        j_minus=j_minus,
        j_plus=j_plus,
        pminus_spec=pminus,
        pplus_spec=pplus,
        trimmed_z0=float(w0),
        trimmed_z1=float(w1),
        pretrim_dropped=pretrim_dropped,
        outside_regions=outside,
        passes=passes,
    )


def distill_simple(pair: SortedPair, pminus=None, pplus=None) -> DistilledSample:
    """Sequential trimming: high-level trims in P- first, then low-level in P+."""
    return _distill(pair, pminus, pplus, modified=False, pretrim_dropped=0,
                    outside=0, algorithm="simple")


def distill_modified(pair: SortedPair, pminus=None, pplus=None) -> DistilledSample:
    """Joint trimming: the trim counts minimize total trims over the
    reaction-curve candidates before the same trimming scans run."""
    return _distill(pair, pminus, pplus, modified=True, pretrim_dropped=0,
                    outside=0, algorithm="modified")


def distill_pair(p, z, w=None, method: str = "modified", pminus=None, pplus=None) -> DistilledSample:
    """Full distillation convenience: region restriction, pre-trim, algorithm.

    ``s1`` in the result is aligned with the input arrays; observations
    outside P- and P+ (under explicit regions) and pre-trim drops get 0.
    """
    if method not in ("simple", "modified"):
        raise ValueError(f"unknown distillation method {method!r}")
    pair = make_sorted_pair(p, z, w)
    outside = 0
    if pminus is not None or pplus is not None:
        pminus, pplus = _resolve_regions(pair, pminus, pplus)
        in_minus, in_plus = _region_masks(pair, pminus, pplus)
        inside = in_minus | in_plus
        outside = int(pair.size - inside.sum())
        if outside:
            pair = pair.subset(np.nonzero(inside)[0])
    before = pair.size
    pair = pretrim(pair)
    dropped = before - pair.size
    return _distill(pair, pminus, pplus, method == "modified", dropped, outside, method)


def _fosd_check(pair: SortedPair):
    cum1, cum0 = _prefix(pair)
    gap = cum1 / cum1[-1] - cum0 / cum0[-1]
    bad = np.nonzero(gap > 1e-10)[0]
    if bad.size:
        return False, int(bad[0])
    return True, None


def verify_fosd(pair: SortedPair, s1) -> tuple[bool, int | None]:
    """Check the dominance constraint over the retained observations.

    ``s1`` is aligned with the arrays the pair was built from.  Returns
    (ok, first violating 0-based index into the retained sorted sample).
    """
    s1 = np.asarray(s1).ravel()
    keep_mask = s1[pair.idx] == 1
    retained = pair.subset(np.nonzero(keep_mask)[0])
    if retained.size == 0 or retained.n0 <= 0 or retained.n1 <= 0:
        return False, 0
    return _fosd_check(retained)
