"""Joint bootstrap test of nesting inequalities and index sufficiency.

The statistic is a variance-weighted Kolmogorov-Smirnov statistic: for each
treatment arm it searches over all closed intervals of partial-residual
values for the largest standardized violation of (i) the nesting
inequalities on the distilled sample and (ii) the index-sufficiency
equalities on the inverse-probability-weighted sample.  P-values come from
a multiplier bootstrap that perturbs the summands with iid mean-zero,
unit-variance multipliers while the standard-deviation estimates stay
fixed.

Intervals are realized as [u_(a), u_(b)] with endpoints on the pooled
sorted distinct residuals (thinned to ``interval_cap`` quantile-spaced
values when there are more), and every interval sum is evaluated through
prefix sums, so the search over the O(m^2) intervals is exact.

A multi-valued discrete instrument is handled by testing every pair of
neighbouring instrument levels and taking the maximum; one multiplier
vector per bootstrap replication is shared across pairs.  The binary test
is the K=2 case of the same engine.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .dataset import Dataset
from .distill import DistillationInfeasibleError, DistilledSample, distill_pair
from .kernelreg import fit_lcr, predict
from .plm import ResidualSet, fit_plm, residuals
from .propensity import PropensityDesign, _probit_mle, fit_probit

DEFAULT_XI = math.sqrt(0.05 * 0.95)
_MULTIPLIERS = ("gaussian", "rademacher", "mammen", "zero")


@dataclass
class TestConfig:
    """Statistical configuration of the joint test."""

    xi: float = DEFAULT_XI
    s2_lo: float = 0.05
    s2_hi: float = 0.95
    n_boot: int = 500
    multiplier: str = "gaussian"
    interval_cap: int = 2000
    seed: int | tuple = 0
    boot_recenter: bool = False

    def __post_init__(self):
        if not 0.0 < self.s2_lo < self.s2_hi < 1.0:
            raise ValueError("require 0 < s2_lo < s2_hi < 1")
        if self.xi <= 0.0:
            raise ValueError("xi must be positive")
        if self.n_boot < 1:
            raise ValueError("n_boot must be at least 1")
        if self.multiplier not in _MULTIPLIERS:
            raise ValueError(f"multiplier must be one of {_MULTIPLIERS}")
        if self.interval_cap < 2:
            raise ValueError("interval_cap must be at least 2")


@dataclass
class EstimationOptions:
    """First-stage estimation choices for the test pipeline."""

    pscore_design: PropensityDesign = field(default_factory=PropensityDesign)
    pscore_max_iter: int = 100
    pscore_ridge: float = 1e-4
    pscore_link: str = "probit"
    phi: str = "nonparametric"
    pooled_outcome: bool = False
    pz: str = "nw"
    distill: str = "modified"
    pminus: tuple[float, float] | None = None
    pplus: tuple[float, float] | None = None
    bw_y: float | None = None
    bw_x: float | None = None
    bw_pz: float | None = None


@dataclass
class S2Info:
    """Inclusion flags for the index-sufficiency moments plus the estimated
    instrument probabilities given the propensity score."""

    s2: np.ndarray
    pz1: np.ndarray


@dataclass
class ComponentDetail:
    value: float | None
    d: int | None = None
    interval: tuple[float, float] | None = None
    skipped: bool = False
    reason: str | None = None

    def to_dict(self):
        return {
            "value": self.value,
            "d": self.d,
            "interval": list(self.interval) if self.interval is not None else None,
            "skipped": self.skipped,
            "reason": self.reason,
        }


@dataclass
class PairResult:
    levels: tuple[int, int]
    nesting: ComponentDetail
    index_plus: ComponentDetail
    index_minus: ComponentDetail
    distilled: DistilledSample | None
    shares: dict

    def t_value(self):
        vals = [c.value for c in (self.nesting, self.index_plus, self.index_minus) if c.value is not None]
        return max(vals) if vals else None

    def to_dict(self):
        return {
            "levels": list(self.levels),
            "nesting": self.nesting.to_dict(),
            "index_plus": self.index_plus.to_dict(),
            "index_minus": self.index_minus.to_dict(),
            "trimming": None
            if self.distilled is None
            else {
                "d0": self.distilled.d0,
                "d1": self.distilled.d1,
                "trimmed_z0": self.distilled.trimmed_z0,
                "trimmed_z1": self.distilled.trimmed_z1,
                "pretrim_dropped": self.distilled.pretrim_dropped,
                "algorithm": self.distilled.algorithm,
            },
            "shares": self.shares,
        }


@dataclass
class TestReport:
    T: float
    p_overall: float
    t_nesting: float | None
    p_nesting: float | None
    t_index: float | None
    p_index: float | None
    pairs: list[PairResult]
    boot_overall: np.ndarray
    boot_nesting: np.ndarray
    boot_index: np.ndarray
    config: TestConfig
    diagnostics: dict
    warnings: list[str]
    method: str = "proposed"

    def to_dict(self):
        n_boot = self.config.n_boot

        def disp(p):
            if p is None:
                return None
            return f"<{1.0 / (n_boot + 1):.6g}" if p <= 1.0 / (n_boot + 1) else f"{p:.6g}"

        return {
            "method": self.method,
            "T": self.T,
            "p_overall": self.p_overall,
            "p_overall_display": disp(self.p_overall),
            "t_nesting": self.t_nesting,
            "p_nesting": self.p_nesting,
            "p_nesting_display": disp(self.p_nesting),
            "t_index": self.t_index,
            "p_index": self.p_index,
            "p_index_display": disp(self.p_index),
            "pairs": [p.to_dict() for p in self.pairs],
            "diagnostics": self.diagnostics,
            "warnings": self.warnings,
            "config": {
                "xi": self.config.xi,
                "s2_lo": self.config.s2_lo,
                "s2_hi": self.config.s2_hi,
                "n_boot": self.config.n_boot,
                "multiplier": self.config.multiplier,
                "interval_cap": self.config.interval_cap,
                "seed": list(self.config.seed) if isinstance(self.config.seed, (tuple, list)) else self.config.seed,
                "boot_recenter": self.config.boot_recenter,
            },
        }


# ---------------------------------------------------------------------------
# Interval machinery


class _Tables:
    """Per-pair prefix-sum tables for the interval-class supremum.

    Observations are sorted by residual once; each per-observation weight
    vector then yields, for every interval [e_a, e_b] of grid endpoints,
    the sum over captured observations as ``hi[b] - lo[a]``.
    """

    def __init__(self, u, cap):
        self.order = np.argsort(u, kind="stable")
        self.u_sorted = u[self.order]
        endpoints = np.unique(self.u_sorted)
        if endpoints.size > cap:
            sel = np.unique(np.round(np.linspace(0, endpoints.size - 1, cap)).astype(int))
            endpoints = endpoints[sel]
        self.endpoints = endpoints
        self.m = endpoints.size
        self.hi_pos = np.searchsorted(self.u_sorted, endpoints, side="right")
        self.lo_pos = np.searchsorted(self.u_sorted, endpoints, side="left")
        self.tril = np.tril_indices(self.m, -1)
        mask = np.zeros((self.m, self.m))
        mask[self.tril] = -np.inf
        self._neg = mask
        self._buf = np.empty((self.m, self.m))

    def prefix(self, vec):
        """hi/lo cumulative values of a per-observation weight vector."""
        cum = np.concatenate(([0.0], np.cumsum(vec[self.order])))
        return cum[self.hi_pos], cum[self.lo_pos]

    def interval_matrix(self, hi, lo):
        return hi[None, :] - lo[:, None]

    def sup(self, hi, lo, rinv, want_argmax=False):
        """max over intervals of (hi[b] - lo[a]) * rinv[a, b]."""
        buf = np.subtract(hi[None, :], lo[:, None], out=self._buf)
        np.multiply(buf, rinv, out=buf)
        np.add(buf, self._neg, out=buf)
        if want_argmax:
            flat = int(np.argmax(buf))
            a, b = divmod(flat, self.m)
            return float(buf[a, b]), (float(self.endpoints[a]), float(self.endpoints[b]))
        return float(buf.max()), None


@dataclass
class _PairInputs:
    """Everything the statistic needs for one pair of instrument levels."""

    levels: tuple[int, int]
    u: np.ndarray
    d: np.ndarray
    z01: np.ndarray
    w: np.ndarray
    scale: float
    lam_pair: float
    nesting_on: bool
    s1: np.ndarray | None = None
    share1: tuple[float, float] | None = None
    index_on: bool = False
    s2: np.ndarray | None = None
    pz: tuple[np.ndarray, np.ndarray] | None = None
    share2: tuple[float, float] | None = None
    lam_global: tuple[float, float] | None = None
    skip_reasons: dict = field(default_factory=dict)


class _PairStat:
    """Prefix tables plus the fixed variance weights for one pair."""

    def __init__(self, inputs: _PairInputs, cfg: TestConfig):
        self.inp = inputs
        self.cfg = cfg
        self.tables = _Tables(inputs.u, cfg.interval_cap)
        w = inputs.w
        in_lo = inputs.z01 == 0
        in_hi = ~in_lo
        w_lo = float(w[in_lo].sum())
        w_hi = float(w[in_hi].sum())
        self.mean_w = {0: np.where(in_lo, w / w_lo, 0.0), 1: np.where(in_hi, w / w_hi, 0.0)}
        self.group_mask = {0: in_lo, 1: in_hi}

        self.nest_base = {}
        self.nest_rinv = {}
        if inputs.nesting_on:
            s1 = inputs.s1.astype(float)
            sh_lo, sh_hi = inputs.share1
            f_lo = self.mean_w[0] * s1 / sh_lo
            f_hi = self.mean_w[1] * s1 / sh_hi
            f2_lo = self.mean_w[0] * s1 / sh_lo**2
            f2_hi = self.mean_w[1] * s1 / sh_hi**2
            for d in (0, 1):
                sel = (inputs.d == d).astype(float)
                # treated arm: low-level mass must not exceed high-level mass
                sign = 1.0 if d == 1 else -1.0
                self.nest_base[d] = sign * (f_lo * sel - f_hi * sel)
                self.nest_rinv[d] = self._rinv(f_lo * sel, f_hi * sel, f2_lo * sel, f2_hi * sel)

        self.idx_base = {}
        self.idx_rinv = {}
        if inputs.index_on:
            s2 = inputs.s2.astype(float)
            pz_lo, pz_hi = inputs.pz
            sh2_lo, sh2_hi = inputs.share2
            lam_lo, lam_hi = inputs.lam_global
            with np.errstate(divide="ignore", invalid="ignore"):
                g_lo = np.where(in_lo & (s2 > 0), self.mean_w[0] * s2 * lam_lo / (pz_lo * sh2_lo), 0.0)
                g_hi = np.where(in_hi & (s2 > 0), self.mean_w[1] * s2 * lam_hi / (pz_hi * sh2_hi), 0.0)
                g2_lo = np.where(in_lo & (s2 > 0), self.mean_w[0] * s2 * (lam_lo / pz_lo) ** 2 / sh2_lo**2, 0.0)
                g2_hi = np.where(in_hi & (s2 > 0), self.mean_w[1] * s2 * (lam_hi / pz_hi) ** 2 / sh2_hi**2, 0.0)
            for d in (0, 1):
                sel = (inputs.d == d).astype(float)
                self.idx_base[d] = g_lo * sel - g_hi * sel
                self.idx_rinv[d] = self._rinv(g_lo * sel, g_hi * sel, g2_lo * sel, g2_hi * sel)

    def _rinv(self, a_lo, a_hi, a2_lo, a2_hi):
        """Reciprocal of (sigma-hat v xi) on the interval grid, lower triangle zeroed."""
        t = self.tables
        lam = self.inp.lam_pair
        m_lo = t.interval_matrix(*t.prefix(a_lo))
        m_hi = t.interval_matrix(*t.prefix(a_hi))
        v_lo = t.interval_matrix(*t.prefix(a2_lo)) - m_lo**2
        v_hi = t.interval_matrix(*t.prefix(a2_hi)) - m_hi**2
        var = lam * v_lo + (1.0 - lam) * v_hi
        sigma = np.sqrt(np.clip(var, 0.0, None))
        rinv = 1.0 / np.maximum(sigma, self.cfg.xi)
        rinv[t.tril] = 0.0
        return rinv

    # -- observed components ------------------------------------------------

    def nesting_sup(self, want_argmax=False) -> ComponentDetail:
        if not self.inp.nesting_on:
            return ComponentDetail(None, skipped=True, reason=self.inp.skip_reasons.get("nesting"))
        best, best_d, best_iv = -np.inf, None, None
        for d in (0, 1):
            hi, lo = self.tables.prefix(self.nest_base[d])
            val, iv = self.tables.sup(self.inp.scale * hi, self.inp.scale * lo, self.nest_rinv[d], want_argmax)
            if val > best:
                best, best_d, best_iv = val, d, iv
        return ComponentDetail(best, best_d, best_iv)

    def index_sup(self, sign: int, want_argmax=False) -> ComponentDetail:
        if not self.inp.index_on:
            return ComponentDetail(None, skipped=True, reason=self.inp.skip_reasons.get("index"))
        best, best_d, best_iv = -np.inf, None, None
        for d in (0, 1):
            hi, lo = self.tables.prefix(self.idx_base[d])
            hi, lo = sign * self.inp.scale * hi, sign * self.inp.scale * lo
            val, iv = self.tables.sup(hi, lo, self.idx_rinv[d], want_argmax)
            if val > best:
                best, best_d, best_iv = val, d, iv
        return ComponentDetail(best, best_d, best_iv)

    # -- bootstrap components -----------------------------------------------

    def boot_sups(self, mult: np.ndarray) -> tuple[float, float]:
        """(nesting, index) bootstrap sups for one multiplier vector."""
        recenter = self.cfg.boot_recenter
        if recenter:
            mbar = {g: float(np.sum(mult * self.mean_w[g])) for g in (0, 1)}
        nest = -np.inf
        if self.inp.nesting_on:
            for d in (0, 1):
                vec = mult * self.nest_base[d]
                if recenter:
                    vec = vec - (
                        self.group_mask[0] * mbar[0] + self.group_mask[1] * mbar[1]
                    ) * self.nest_base[d]
                hi, lo = self.tables.prefix(vec)
                val, _ = self.tables.sup(self.inp.scale * hi, self.inp.scale * lo, self.nest_rinv[d])
                nest = max(nest, val)
        index = -np.inf
        if self.inp.index_on:
            for d in (0, 1):
                vec = mult * self.idx_base[d]
                if recenter:
                    vec = vec - (
                        self.group_mask[0] * mbar[0] + self.group_mask[1] * mbar[1]
                    ) * self.idx_base[d]
                hi, lo = self.tables.prefix(vec)
                hi, lo = self.inp.scale * hi, self.inp.scale * lo
                up, _ = self.tables.sup(hi, lo, self.idx_rinv[d])
                dn, _ = self.tables.sup(-hi, -lo, self.idx_rinv[d])
                index = max(index, up, dn)
        return nest, index


# ---------------------------------------------------------------------------
# Multipliers and p-values


def _rng_for_replication(seed, rep: int) -> np.random.Generator:
    entropy = seed if isinstance(seed, (tuple, list)) else (int(seed),)
    return np.random.default_rng(np.random.SeedSequence(entropy=list(entropy), spawn_key=(rep,)))


def _draw_multipliers(rng: np.random.Generator, n: int, kind: str) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal(n)
    if kind == "rademacher":
        return rng.integers(0, 2, n).astype(float) * 2.0 - 1.0
    if kind == "mammen":
        golden = (1.0 + math.sqrt(5.0)) / 2.0
        prob = (math.sqrt(5.0) + 1.0) / (2.0 * math.sqrt(5.0))
        lowval = 1.0 - golden  # (1 - sqrt(5)) / 2
        return np.where(rng.random(n) < prob, lowval, golden)
    if kind == "zero":
        return np.zeros(n)
    raise ValueError(f"unknown multiplier kind {kind!r}")


def _p_value(draws: np.ndarray, observed: float, n_boot: int) -> float:
    return float((1 + np.sum(draws >= observed)) / (1 + n_boot))


# ---------------------------------------------------------------------------
# Input assembly


def _effective_sizes(w_lo, w_hi, n_rows):
    """Effective group sizes: weight shares scaled to the row count, so the
    statistic is invariant under a common rescaling of all weights."""
    total = w_lo + w_hi
    return n_rows * w_lo / total, n_rows * w_hi / total


def _scale_factor(w_lo, w_hi, n_rows):
    n0e, n1e = _effective_sizes(w_lo, w_hi, n_rows)
    return math.sqrt(n1e * n0e / (n1e + n0e))


def _weighted_share(flags, w, group_mask):
    denom = float(w[group_mask].sum())
    if denom <= 0:
        return 0.0
    return float((flags * w)[group_mask].sum()) / denom


def _assemble_pair(levels, u, d, z01, w, s1, s2info, lam_global) -> _PairInputs:
    in_lo = z01 == 0
    in_hi = ~in_lo
    w_lo, w_hi = float(w[in_lo].sum()), float(w[in_hi].sum())
    if w_lo <= 0 or w_hi <= 0:
        raise ValueError("both instrument levels must be present in the pair")
    scale = _scale_factor(w_lo, w_hi, u.size)
    lam_pair = w_hi / (w_lo + w_hi)
    skip = {}

    nesting_on = s1 is not None
    share1 = None
    if nesting_on:
        share1 = (_weighted_share(s1, w, in_lo), _weighted_share(s1, w, in_hi))
        if min(share1) <= 0:
            nesting_on = False
            skip["nesting"] = "distillation retained no observations in one instrument group"

    index_on = s2info is not None
    s2 = pz = share2 = None
    if index_on:
        s2 = s2info.s2
        pz_hi = s2info.pz1
        pz = (1.0 - pz_hi, pz_hi)
        share2 = (_weighted_share(s2, w, in_lo), _weighted_share(s2, w, in_hi))
        if min(share2) <= 0:
            index_on = False
            skip["index"] = "no observations pass the inverse-probability band"

    return _PairInputs(
        levels=levels,
        u=u,
        d=d,
        z01=z01,
        w=w,
        scale=scale,
        lam_pair=lam_pair,
        nesting_on=nesting_on,
        s1=s1,
        share1=share1,
        index_on=index_on,
        s2=s2,
        pz=pz,
        share2=share2,
        lam_global=lam_global,
        skip_reasons=skip,
    )


def _binary_levels(res: ResidualSet):
    levels = np.unique(res.z)
    if levels.size != 2:
        raise ValueError(f"binary test requires exactly 2 instrument levels, found {levels.size}")
    return levels


# ---------------------------------------------------------------------------
# Public operations on a ResidualSet (binary instrument)


def build_s2(
    res: ResidualSet,
    band: tuple[float, float] = (0.05, 0.95),
    method: str = "nw",
    bandwidth: float | None = None,
) -> S2Info:
    """Estimate Pr(Z=1 | p) and flag observations inside the band.

    ``method`` is 'nw' (local-constant regression with cross-validated
    bandwidth) or 'probit' (probit of the instrument on the score).
    """
    _binary_levels(res)
    zbin = (res.z == res.z.max()).astype(float)
    if method == "nw":
        fit = fit_lcr(res.pscore, zbin, res.weight, bandwidth=bandwidth)
        pz1 = predict(fit, res.pscore)
    elif method == "probit":
        design = np.column_stack([np.ones(res.n), res.pscore])
        beta, _, _, _ = _probit_mle(design, zbin, res.weight)
        pz1 = norm.cdf(design @ beta)
    else:
        raise ValueError(f"unknown Pr(Z|p) estimator {method!r}")
    pz1 = np.clip(pz1, 0.0, 1.0)
    s2 = ((pz1 >= band[0]) & (pz1 <= band[1])).astype(np.int8)
    if not s2.any():
        warnings.warn(
            "estimated Pr(Z=1|p) is outside the band everywhere; "
            "the index-sufficiency component will be skipped"
        )
    return S2Info(s2=s2, pz1=pz1)


def _pair_from_residuals(res: ResidualSet, s1, s2info, cfg) -> _PairInputs:
    levels = _binary_levels(res)
    z01 = (res.z == levels[1]).astype(np.int8)
    lam = float(res.weight[z01 == 1].sum() / res.weight.sum())
    s1_arr = None if s1 is None else np.asarray(s1).ravel().astype(np.int8)
    return _assemble_pair(
        (int(levels[0]), int(levels[1])),
        res.u,
        res.d,
        z01,
        res.weight,
        s1_arr,
        s2info,
        (1.0 - lam, lam),
    )


@dataclass
class StatisticResult:
    T: float
    nesting: ComponentDetail
    index_plus: ComponentDetail
    index_minus: ComponentDetail
    _stat: _PairStat = field(repr=False, default=None)


def statistic(res: ResidualSet, s1, s2info: S2Info | None, cfg: TestConfig) -> StatisticResult:
    """Observed test statistic for a binary instrument.

    ``s1`` may be None to drop the nesting component; ``s2info`` may be
    None to drop the index-sufficiency component.
    """
    inputs = _pair_from_residuals(res, s1, s2info, cfg)
    stat = _PairStat(inputs, cfg)
    nest = stat.nesting_sup(want_argmax=True)
    up = stat.index_sup(+1, want_argmax=True)
    dn = stat.index_sup(-1, want_argmax=True)
    vals = [c.value for c in (nest, up, dn) if c.value is not None]
    if not vals:
        raise ValueError("both test components are unavailable")
    return StatisticResult(T=max(vals), nesting=nest, index_plus=up, index_minus=dn, _stat=stat)


def bootstrap(res: ResidualSet, s1, s2info: S2Info | None, cfg: TestConfig,
              stat: StatisticResult | None = None) -> dict:
    """Multiplier-bootstrap draws for a binary instrument.

    Returns arrays ``overall``, ``nesting`` and ``index`` of length
    ``cfg.n_boot``; first-stage estimates and variance tables stay fixed.
    """
    if stat is None:
        stat = statistic(res, s1, s2info, cfg)
    pair_stat = stat._stat
    nest = np.full(cfg.n_boot, -np.inf)
    index = np.full(cfg.n_boot, -np.inf)
    for rep in range(cfg.n_boot):
        rng = _rng_for_replication(cfg.seed, rep)
        mult = _draw_multipliers(rng, res.n, cfg.multiplier)
        nest[rep], index[rep] = pair_stat.boot_sups(mult)
    overall = np.maximum(nest, index)
    return {"overall": overall, "nesting": nest, "index": index}


# ---------------------------------------------------------------------------
# Full pipelines


def _fit_level_probs(res: ResidualSet, opts: EstimationOptions) -> np.ndarray:
    """Pr(Z = level | p) for every level, (n, K).  Levels 1..K-1 are fitted
    on indicator responses; level 0 is the complement, so the binary case
    reduces to a single fit of Pr(Z=1 | p)."""
    n_levels = res.z_levels.size
    probs = np.zeros((res.n, n_levels))
    for lev in range(1, n_levels):
        target = (res.z == lev).astype(float)
        if opts.pz == "nw":
            fit = fit_lcr(res.pscore, target, res.weight, bandwidth=opts.bw_pz)
            probs[:, lev] = np.clip(predict(fit, res.pscore), 0.0, 1.0)
        elif opts.pz == "probit":
            design = np.column_stack([np.ones(res.n), res.pscore])
            beta, _, _, _ = _probit_mle(design, target, res.weight)
            probs[:, lev] = norm.cdf(design @ beta)
        else:
            raise ValueError(f"unknown Pr(Z|p) estimator {opts.pz!r}")
    probs[:, 0] = np.clip(1.0 - probs[:, 1:].sum(axis=1), 0.0, 1.0)
    return probs


def prepare_residuals(ds: Dataset, opts: EstimationOptions):
    """Run the estimation pipeline: probit scores, partially linear fit,
    partial residuals.  Returns (pfit, plfit, residual_set)."""
    pfit = fit_probit(
        ds,
        opts.pscore_design,
        max_iter=opts.pscore_max_iter,
        ridge=opts.pscore_ridge,
        link=opts.pscore_link,
    )
    plfit = fit_plm(ds, pfit, mode=opts.phi, pooled=opts.pooled_outcome,
                    bw_y=opts.bw_y, bw_x=opts.bw_x)
    return pfit, plfit, residuals(ds, plfit)


def run_test_binary(ds: Dataset, cfg: TestConfig = TestConfig(),
                    opts: EstimationOptions = EstimationOptions()) -> TestReport:
    """Full joint test for a binary instrument."""
    if ds.n_levels != 2:
        raise ValueError(f"binary test requires K=2 instrument levels, found {ds.n_levels}")
    return run_test_multivalued(ds, cfg, opts)


def run_test_multivalued(ds: Dataset, cfg: TestConfig = TestConfig(),
                         opts: EstimationOptions = EstimationOptions()) -> TestReport:
    """Joint test for an ordered discrete instrument: every neighbouring
    pair of levels is tested and the maximum is taken.  With K=2 this is
    exactly the binary test."""
    if ds.n_levels < 2:
        raise ValueError("need at least two instrument levels")
    _, plfit, res = prepare_residuals(ds, opts)
    probs = _fit_level_probs(res, opts)
    warn_list: list[str] = []
    total_w = res.weight.sum()
    lam_globals = [float(res.weight[res.z == k].sum() / total_w) for k in range(ds.n_levels)]

    pair_stats: list[_PairStat] = []
    pair_results: list[PairResult] = []
    pair_masks: list[np.ndarray] = []
    for k in range(ds.n_levels - 1):
        mask = (res.z == k) | (res.z == k + 1)
        idx = np.nonzero(mask)[0]
        u, d, w = res.u[idx], res.d[idx], res.weight[idx]
        z01 = (res.z[idx] == k + 1).astype(np.int8)
        levels = (int(res.z_levels[k]), int(res.z_levels[k + 1]))
        if z01.min() == z01.max():
            warn_list.append(f"pair {levels}: one level empty; pair skipped")
            continue

        s1 = None
        distilled = None
        try:
            distilled = distill_pair(res.pscore[idx], z01, w, method=opts.distill,
                                     pminus=opts.pminus, pplus=opts.pplus)
            s1 = distilled.s1
        except DistillationInfeasibleError as exc:
            warn_list.append(f"pair {levels}: distillation infeasible ({exc}); nesting component skipped")

        pz_lo = probs[idx, k]
        pz_hi = probs[idx, k + 1]
        in_band = (
            (pz_lo >= cfg.s2_lo) & (pz_lo <= cfg.s2_hi)
            & (pz_hi >= cfg.s2_lo) & (pz_hi <= cfg.s2_hi)
        )
        s2info = S2Info(s2=in_band.astype(np.int8), pz1=pz_hi)
        if not in_band.any():
            warn_list.append(
                f"pair {levels}: no observations inside the inverse-probability band; "
                "index component skipped"
            )
            s2info = None

        inputs = _assemble_pair(levels, u, d, z01, w, s1, s2info,
                                (lam_globals[k], lam_globals[k + 1]))
        # the assembly can still disable components (zero shares)
        for key, reason in inputs.skip_reasons.items():
            warn_list.append(f"pair {levels}: {reason}")
        # index moments for K>2 use the level-specific probability, not the complement
        if inputs.index_on:
            inputs.pz = (pz_lo, pz_hi)
        stat = _PairStat(inputs, cfg)
        nest = stat.nesting_sup(want_argmax=True)
        up = stat.index_sup(+1, want_argmax=True)
        dn = stat.index_sup(-1, want_argmax=True)
        pair_stats.append(stat)
        pair_masks.append(idx)
        pair_results.append(
            PairResult(
                levels=levels,
                nesting=nest,
                index_plus=up,
                index_minus=dn,
                distilled=distilled,
                shares={
                    "s1": list(inputs.share1) if inputs.share1 else None,
                    "s2": list(inputs.share2) if inputs.share2 else None,
                    "lambda_pair": inputs.lam_pair,
                },
            )
        )

    if not pair_results:
        raise ValueError("no testable instrument pairs")

    def observed(component_values):
        vals = [v for v in component_values if v is not None]
        return max(vals) if vals else None

    t_nesting = observed([p.nesting.value for p in pair_results])
    t_index = observed(
        [p.index_plus.value for p in pair_results] + [p.index_minus.value for p in pair_results]
    )
    t_vals = [v for v in (t_nesting, t_index) if v is not None]
    if not t_vals:
        raise ValueError("both test components are unavailable in every pair")
    t_overall = max(t_vals)

    boot_nest = np.full(cfg.n_boot, -np.inf)
    boot_index = np.full(cfg.n_boot, -np.inf)
    for rep in range(cfg.n_boot):
        rng = _rng_for_replication(cfg.seed, rep)
        mult_full = _draw_multipliers(rng, res.n, cfg.multiplier)
        for stat, idx in zip(pair_stats, pair_masks):
            nest_v, idx_v = stat.boot_sups(mult_full[idx])
            boot_nest[rep] = max(boot_nest[rep], nest_v)
            boot_index[rep] = max(boot_index[rep], idx_v)
    boot_overall = np.maximum(boot_nest, boot_index)

    p_nesting = None if t_nesting is None else _p_value(boot_nest, t_nesting, cfg.n_boot)
    p_index = None if t_index is None else _p_value(boot_index, t_index, cfg.n_boot)
    boot_for_overall = np.where(np.isfinite(boot_overall), boot_overall, -np.inf)
    p_overall = _p_value(boot_for_overall, t_overall, cfg.n_boot)

    diagnostics = {
        "n": ds.n,
        "levels": ds.z_levels.tolist(),
        "lambda": lam_globals,
        "phi_mode": plfit.phi_mode,
        "pooled_outcome": plfit.pooled,
        "dropped_directions": plfit.dropped_directions,
    }
    return TestReport(
        T=t_overall,
        p_overall=p_overall,
        t_nesting=t_nesting,
        p_nesting=p_nesting,
        t_index=t_index,
        p_index=p_index,
        pairs=pair_results,
        boot_overall=boot_overall,
        boot_nesting=boot_nest,
        boot_index=boot_index,
        config=cfg,
        diagnostics=diagnostics,
        warnings=warn_list,
    )
