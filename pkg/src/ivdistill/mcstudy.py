"""Monte Carlo harness: data-generating processes and rejection-rate studies.

Every process draws three standard-normal covariates, a binary instrument
driven by the covariates, a threshold-crossing selection equation and a
linear outcome.  The size process uses an irrelevant but valid instrument;
the four power processes break instrument validity through an outcome
error whose distribution depends on the instrument (location shift,
fatter tails, concentration, and a mixture).

Parameter vectors (theta, gamma, delta) are redrawn each replication by
default; ``fix_params`` holds a single draw fixed across replications.
Within a study every method consumes the identical generated sample, and
replication random streams are keyed by (process, sample size, replication
index) so results are independent of worker scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .baselines import test_binarized_pscore, test_no_covariates
from .dataset import Dataset, make_dataset
from .ivtest import EstimationOptions, TestConfig, run_test_binary
from .propensity import PropensityDesign

DGP_KINDS = ("size", "power1", "power2", "power3", "power4")
_DGP_CODE = {kind: i for i, kind in enumerate(DGP_KINDS)}
LEVELS = (0.10, 0.05, 0.01)
METHODS = ("proposed", "no-covariates", "binarized")

_MIX_VALUES = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
_MIX_PROBS = np.array([0.15, 0.2, 0.3, 0.2, 0.15])
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}


def draw_mixture_shift(rng: np.random.Generator, n: int) -> np.ndarray:
    """Location shifts of the mixture power process."""
    return rng.choice(_MIX_VALUES, size=n, p=_MIX_PROBS)


@dataclass(frozen=True)
class DgpSpec:
    """One Monte Carlo data-generating process."""

    kind: str
    n: int
    gamma_mode: str = "zero"  # "zero" | "uniform"
    delta_mode: str = "uniform"  # "uniform" | "narrow"
    k_x: int = 3
    rho: float = 0.3

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValueError(f"kind must be one of {DGP_KINDS}")
        if self.gamma_mode not in ("zero", "uniform"):
            raise ValueError("gamma_mode must be 'zero' or 'uniform'")
        if self.delta_mode not in ("uniform", "narrow"):
            raise ValueError("delta_mode must be 'uniform' or 'narrow'")

    @property
    def alphas(self) -> tuple[float, float]:
        if self.kind == "size":
            return 0.0, 0.0
        return float(norm.ppf(0.45)), float(norm.ppf(0.55))


def draw_params(spec: DgpSpec, rng: np.random.Generator) -> dict:
    theta = rng.uniform(-1.0, 1.0, spec.k_x)
    gamma = np.zeros(spec.k_x) if spec.gamma_mode == "zero" else rng.uniform(-1.0, 1.0, spec.k_x)
    bound = 1.0 if spec.delta_mode == "uniform" else 0.1
    delta = rng.uniform(-bound, bound, spec.k_x)
    return {"theta": theta, "gamma": gamma, "delta": delta}


def draw_sample(spec: DgpSpec, rng: np.random.Generator, params: dict | None = None) -> Dataset:
    """Generate one sample; ``params`` overrides the per-call parameter draw."""
    if params is None:
        params = draw_params(spec, rng)
    theta, gamma, delta = params["theta"], params["gamma"], params["delta"]
    n = spec.n
    x = rng.standard_normal((n, spec.k_x))
    u_z = rng.standard_normal(n)
    z = (x @ gamma + u_z >= 0.0).astype(np.int8)

    cov = np.array([[1.0, spec.rho], [spec.rho, 1.0]])
    chol = np.linalg.cholesky(cov)
    shocks = rng.standard_normal((n, 2)) @ chol.T
    u0, u_d = shocks[:, 0], shocks[:, 1]

    alpha0, alpha1 = spec.alphas
    d = (alpha0 * (1 - z) + alpha1 * z + x @ delta + u_d >= 0.0).astype(np.int8)

    y0 = x @ theta + u0
    if spec.kind == "size":
        y1 = x @ theta + 1.0 + u0
    else:
        if spec.kind == "power1":
            u1 = np.where(z == 1, u0, -0.7 + u0)
        elif spec.kind == "power2":
            u1 = np.where(z == 1, u0, 1.675 * u0)
        elif spec.kind == "power3":
            u1 = np.where(z == 1, u0, 0.515 * u0)
        else:  # power4
            mu_l = draw_mixture_shift(rng, n)
            u1 = np.where(z == 1, u0, mu_l + 0.125 * u0)
        y1 = x @ theta + u1
    y = np.where(d == 1, y1, y0)
    return make_dataset(y=y, d=d, x=x, z=z)


@dataclass
class RejectionRow:
    dgp: str
    n: int
    method: str
    xi: float
    level: float
    rate: float
    mc_se: float
    n_reps: int
    n_failed: int


@dataclass
class RejectionTable:
    rows: list[RejectionRow] = field(default_factory=list)

    def rate(self, dgp, n, method, level) -> float:
        for r in self.rows:
            if (r.dgp, r.n, r.method) == (dgp, n, method) and math.isclose(r.level, level):
                return r.rate
        raise KeyError((dgp, n, method, level))

    def to_records(self) -> list[dict]:
        return [vars(r).copy() for r in self.rows]

    def to_csv(self, path):
        import pandas as pd

        pd.DataFrame(self.to_records()).to_csv(path, index=False)

    def to_text(self) -> str:
        header = f"{'dgp':8} {'n':>6} {'method':14} {'xi':>6} {'level':>6} {'rate':>7} {'se':>7} {'reps':>5} {'fail':>4}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.dgp:8} {r.n:>6d} {r.method:14} {r.xi:>6.3f} {r.level:>6.2f} "
                f"{r.rate:>7.3f} {r.mc_se:>7.3f} {r.n_reps:>5d} {r.n_failed:>4d}"
            )
        return "\n".join(lines)


# Estimation choices matching the Monte Carlo design: the treatment probit
# gets the correct specification (no instrument-covariate interactions) and
# the outcome equation pools the covariate coefficients across arms.
MC_ESTIMATION = EstimationOptions(
    pscore_design=PropensityDesign(include_interactions=False),
    pooled_outcome=True,
)


def _method_seed(master_seed: int, spec: DgpSpec, rep: int, method: str) -> tuple:
    return (int(master_seed), _DGP_CODE[spec.kind], spec.n, int(rep), _METHOD_CODE[method])


def _run_replication(args):
    spec, cfg, methods, master_seed, rep, fixed_params, opts, component = args
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=[int(master_seed), _DGP_CODE[spec.kind], spec.n, int(rep)])
    )
    ds = draw_sample(spec, rng, params=fixed_params)
    out: dict[str, float | None] = {}
    for method in methods:
        cfg_m = replace(cfg, seed=_method_seed(master_seed, spec, rep, method))
        try:
            if method == "proposed":
                report = run_test_binary(ds, cfg_m, opts)
                out[method] = report.p_overall
                if component:
                    out["nesting"] = report.p_nesting
                    out["index"] = report.p_index
                    out["overall"] = report.p_overall
            elif method == "no-covariates":
                out[method] = test_no_covariates(ds, cfg_m).p_value
            elif method == "binarized":
                out[method] = test_binarized_pscore(ds, cfg_m, opts).p_value
            else:
                raise ValueError(f"unknown method {method!r}")
        except Exception as exc:  # noqa: BLE001 - replication failures are tallied
            out[method] = None
            out.setdefault("errors", []).append(f"{method}: {exc}")
            if component and method == "proposed":
                out["nesting"] = out["index"] = out["overall"] = None
    return rep, out


def _tally(table, spec, cfg, keys, results, R):
    for key in keys:
        pvals = [res.get(key) for _, res in results]
        failed = sum(1 for p in pvals if p is None)
        good = [p for p in pvals if p is not None]
        for level in LEVELS:
            if good:
                rate = float(np.mean([p <= level for p in good]))
                se = math.sqrt(rate * (1.0 - rate) / len(good))
            else:
                rate, se = float("nan"), float("nan")
            table.rows.append(
                RejectionRow(
                    dgp=spec.kind,
                    n=spec.n,
                    method=key,
                    xi=cfg.xi,
                    level=level,
                    rate=rate,
                    mc_se=se,
                    n_reps=len(good),
                    n_failed=failed,
                )
            )


def _study(specs, methods, cfg, R, seed, threads, fix_params, opts, component) -> RejectionTable:
    table = RejectionTable()
    keys_extra = ("nesting", "index", "overall") if component else ()
    for spec in specs:
        fixed = None
        if fix_params:
            rng0 = np.random.default_rng(
                np.random.SeedSequence(entropy=[int(seed), _DGP_CODE[spec.kind], spec.n, -1])
            )
            fixed = draw_params(spec, rng0)
        jobs = [(spec, cfg, tuple(methods), seed, rep, fixed, opts, component) for rep in range(R)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = sorted(pool.map(_run_replication, jobs, chunksize=1))
        else:
            results = sorted(map(_run_replication, jobs))
        _tally(table, spec, cfg, tuple(methods) + keys_extra, results, R)
    return table


def rejection_study(
    specs,
    methods=("proposed",),
    cfg: TestConfig = TestConfig(),
    R: int = 200,
    seed: int = 0,
    threads: int = 1,
    fix_params: bool = False,
    opts: EstimationOptions = MC_ESTIMATION,
) -> RejectionTable:
    """Rejection rates of the requested methods over R replications.

    One sample per replication is shared by every method; per-replication
    failures (for example infeasible distillation) are excluded from the
    denominator and counted in ``n_failed``.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods: {sorted(bad)}")
    return _study(specs, methods, cfg, R, seed, threads, fix_params, opts, component=False)


def component_study(
    specs,
    cfg: TestConfig = TestConfig(),
    R: int = 200,
    seed: int = 0,
    threads: int = 1,
    fix_params: bool = False,
    opts: EstimationOptions = MC_ESTIMATION,
) -> RejectionTable:
    """Rejection rates of the nesting, index, and overall components of the
    proposed test (rows keyed 'nesting', 'index', 'overall')."""
    if R < 1:
        raise ValueError("R must be at least 1")
    return _study(specs, ("proposed",), cfg, R, seed, threads, fix_params, opts, component=True)
