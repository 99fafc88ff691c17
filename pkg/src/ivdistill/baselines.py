"""Comparison tests: covariate-free nesting test and binarized-score test.

Both baselines run the one-sided nesting statistic with the same trimming
constant, interval enumeration and multiplier bootstrap as the main test,
so rejection rates are comparable within one computational framework.

``test_no_covariates`` applies the nesting inequalities directly to the raw
outcome conditional on the instrument: no estimation, no trimming.

``test_binarized_pscore`` estimates the propensity score and partial
residuals exactly as the main pipeline does, then coarsens the score at
its weighted median into a two-level pseudo-instrument; the coarsened
level is stochastically ordered by construction, so no distillation is
applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .ivtest import (
    EstimationOptions,
    TestConfig,
    _PairStat,
    _assemble_pair,
    _draw_multipliers,
    _p_value,
    _rng_for_replication,
    prepare_residuals,
)


@dataclass
class BaselineReport:
    which: str
    T: float
    p_value: float
    boot: np.ndarray
    detail: dict
    config: TestConfig

    def to_dict(self):
        n_boot = self.config.n_boot
        display = (
            f"<{1.0 / (n_boot + 1):.6g}" if self.p_value <= 1.0 / (n_boot + 1) else f"{self.p_value:.6g}"
        )
        return {
            "method": self.which,
            "T": self.T,
            "p_overall": self.p_value,
            "p_overall_display": display,
            "detail": self.detail,
        }


def _nesting_only(u, d, z01, w, levels, cfg):
    """Shared core: nesting statistic plus bootstrap on a two-group sample."""
    s1 = np.ones(u.shape[0], dtype=np.int8)
    inputs = _assemble_pair(levels, u, d, z01.astype(np.int8), w, s1, None, (None, None))
    stat = _PairStat(inputs, cfg)
    nest = stat.nesting_sup(want_argmax=True)
    draws = np.empty(cfg.n_boot)
    for rep in range(cfg.n_boot):
        rng = _rng_for_replication(cfg.seed, rep)
        mult = _draw_multipliers(rng, u.shape[0], cfg.multiplier)
        draws[rep], _ = stat.boot_sups(mult)
    return nest, draws


def test_no_covariates(ds: Dataset, cfg: TestConfig = TestConfig()) -> BaselineReport:
    """Nesting inequalities on the raw outcome conditional on the instrument."""
    if ds.n_levels != 2:
        raise ValueError(f"baseline requires K=2 instrument levels, found {ds.n_levels}")
    z01 = (ds.z == 1).astype(np.int8)
    levels = (int(ds.z_levels[0]), int(ds.z_levels[1]))
    nest, draws = _nesting_only(ds.y, ds.d, z01, ds.weight, levels, cfg)
    return BaselineReport(
        which="no-covariates",
        T=nest.value,
        p_value=_p_value(draws, nest.value, cfg.n_boot),
        boot=draws,
        detail={"argmax_interval": list(nest.interval), "argmax_d": nest.d},
        config=cfg,
    )


def test_binarized_pscore(
    ds: Dataset,
    cfg: TestConfig = TestConfig(),
    opts: EstimationOptions = EstimationOptions(),
) -> BaselineReport:
    """Nesting inequalities on partial residuals conditional on the
    median-coarsened propensity score."""
    if ds.n_levels != 2:
        raise ValueError(f"baseline requires K=2 instrument levels, found {ds.n_levels}")
    _, _, res = prepare_residuals(ds, opts)
    order = np.argsort(res.pscore, kind="stable")
    cum = np.cumsum(res.weight[order])
    med = res.pscore[order][min(int(np.searchsorted(cum, 0.5 * cum[-1])), res.n - 1)]
    zstar = (res.pscore > med).astype(np.int8)
    if zstar.min() == zstar.max():
        raise ValueError("coarsened propensity score has a single level")
    nest, draws = _nesting_only(res.u, res.d, zstar, res.weight, (0, 1), cfg)
    return BaselineReport(
        which="binarized",
        T=nest.value,
        p_value=_p_value(draws, nest.value, cfg.n_boot),
        boot=draws,
        detail={
            "argmax_interval": list(nest.interval),
            "argmax_d": nest.d,
            "median_pscore": float(med),
            "n_above": int(zstar.sum()),
        },
        config=cfg,
    )
