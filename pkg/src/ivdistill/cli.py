"""Command-line interface: test, distill, simulate, oracle subcommands.

Every run writes its primary output (JSON report or CSV table) plus a
manifest recording the resolved configuration, input digests, seed and
tool version.  Primary outputs are byte-identical across reruns with the
same seed and across --threads settings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import test_binarized_pscore, test_no_covariates
from .dataset import DataValidationError, load_csv
from .distill import DistillationInfeasibleError, distill_pair
from .ivtest import (
    DEFAULT_XI,
    EstimationOptions,
    TestConfig,
    prepare_residuals,
    run_test_multivalued,
)
from .kernelreg import rule_of_thumb_bandwidth
from .mcstudy import DgpSpec, component_study, rejection_study
from .biasoracle import ExampleParams, OracleError, default_grid, violation_map
from .propensity import ProbitError, PropensityDesign

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--y", default="y", help="outcome column")
    p.add_argument("--d", default="d", help="treatment column")
    p.add_argument("--z", default="z", help="instrument column")
    p.add_argument("--x", default="x1", help="comma-separated covariate columns")
    p.add_argument("--weight", default=None, help="optional weight column")


def _add_common_args(p):
    p.add_argument("--output-dir", default=".", help="directory for outputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log", choices=("json", "text"), default="text")


def _add_test_args(p):
    p.add_argument("--method", choices=("proposed", "no-covariates", "binarized"), default="proposed")
    p.add_argument("--xi", type=float, default=DEFAULT_XI)
    p.add_argument("--s2-lo", type=float, default=0.05)
    p.add_argument("--s2-hi", type=float, default=0.95)
    p.add_argument("--boot", type=int, default=500)
    p.add_argument("--multiplier", choices=("gaussian", "rademacher", "mammen"), default="gaussian")
    p.add_argument("--interval-cap", type=int, default=2000)
    p.add_argument("--boot-recenter", action="store_true")
    p.add_argument("--phi", default="nonparametric", help="'nonparametric' or 'poly:<k>'")
    p.add_argument("--pooled-outcome", action="store_true",
                   help="restrict covariate coefficients to be equal across arms")
    p.add_argument("--pz", choices=("nw", "probit"), default="nw")
    p.add_argument("--distill", choices=("simple", "modified"), default="modified")
    p.add_argument("--pminus", default=None, help="lower score region as 'lo,hi'")
    p.add_argument("--pplus", default=None, help="upper score region as 'lo,hi'")
    p.add_argument("--pscore-max-iter", type=int, default=100)
    p.add_argument("--pscore-ridge", type=float, default=1e-4)
    p.add_argument("--pscore-link", default="probit")
    p.add_argument("--no-interactions", action="store_true",
                   help="drop instrument-covariate interactions from the score design")
    p.add_argument("--bw-y", type=float, default=None)
    p.add_argument("--bw-x", type=float, default=None)
    p.add_argument("--bw-pz", type=float, default=None)
    p.add_argument("--emit-densities", action="store_true",
                   help="also write kernel-smoothed residual subdensities as CSV")


def build_parser() -> _Parser:
    parser = _Parser(prog="ivdistill", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run an instrument validity test on a CSV")
    _add_data_args(p_test)
    _add_common_args(p_test)
    _add_test_args(p_test)

    p_dist = sub.add_parser("distill", help="emit the trimmed-sample indicator for a binary instrument")
    _add_data_args(p_dist)
    _add_common_args(p_dist)
    p_dist.add_argument("--distill", choices=("simple", "modified"), default="modified")
    p_dist.add_argument("--pminus", default=None)
    p_dist.add_argument("--pplus", default=None)
    p_dist.add_argument("--phi", default="nonparametric")
    p_dist.add_argument("--pooled-outcome", action="store_true")
    p_dist.add_argument("--no-interactions", action="store_true")

    p_sim = sub.add_parser("simulate", help="Monte Carlo rejection-rate study")
    _add_common_args(p_sim)
    p_sim.add_argument("--dgp", choices=("size", "power1", "power2", "power3", "power4"), default="size")
    p_sim.add_argument("--n", type=int, default=500)
    p_sim.add_argument("--reps", type=int, default=200)
    p_sim.add_argument("--boot", type=int, default=200)
    p_sim.add_argument("--xi", type=float, default=DEFAULT_XI)
    p_sim.add_argument("--methods", default="proposed",
                       help="comma-separated subset of proposed,no-covariates,binarized")
    p_sim.add_argument("--gamma", choices=("zero", "uniform"), default="zero")
    p_sim.add_argument("--delta", choices=("uniform", "narrow"), default="uniform")
    p_sim.add_argument("--fix-params", action="store_true")
    p_sim.add_argument("--component-study", action="store_true",
                       help="tally nesting/index/overall component rejection rates")
    p_sim.add_argument("--full", action="store_true", help="table-scale run: 1000 reps, 500 bootstrap")
    p_sim.add_argument("--rep-log", action="store_true", help="write per-replication p-values as JSON")

    p_or = sub.add_parser("oracle", help="analytic violation map for the example process")
    _add_common_args(p_or)
    p_or.add_argument("--grid", choices=("default", "coarse"), default="default")
    p_or.add_argument("--nu", type=float, default=0.2)
    p_or.add_argument("--alpha", type=float, default=0.3)
    p_or.add_argument("--mu1", type=float, default=0.3)
    p_or.add_argument("--mu0", type=float, default=0.0)
    p_or.add_argument("--u-points", type=int, default=400)
    return parser


def _parse_interval(text):
    if text is None:
        return None
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise DataValidationError(f"expected 'lo,hi', got {text!r}") from exc
    return (lo, hi)


def _schema(args):
    return {
        "y": args.y,
        "d": args.d,
        "z": args.z,
        "x": [c for c in args.x.split(",") if c],
        "weight": args.weight,
    }


def _estimation_options(args) -> EstimationOptions:
    return EstimationOptions(
        pscore_design=PropensityDesign(include_interactions=not getattr(args, "no_interactions", False)),
        pscore_max_iter=getattr(args, "pscore_max_iter", 100),
        pscore_ridge=getattr(args, "pscore_ridge", 1e-4),
        pscore_link=getattr(args, "pscore_link", "probit"),
        phi=args.phi,
        pooled_outcome=getattr(args, "pooled_outcome", False),
        pz=getattr(args, "pz", "nw"),
        distill=args.distill,
        pminus=_parse_interval(getattr(args, "pminus", None)),
        pplus=_parse_interval(getattr(args, "pplus", None)),
        bw_y=getattr(args, "bw_y", None),
        bw_x=getattr(args, "bw_x", None),
        bw_pz=getattr(args, "bw_pz", None),
    )


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(outdir: Path, subcommand: str, config: dict, inputs: list, seed: int, wall: float):
    core = {
        "subcommand": subcommand,
        "config": config,
        "input_digests": {str(p): _digest(p) for p in inputs},
        "seed": seed,
        "version": __version__,
    }
    digest = hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()
    core["manifest_hash"] = digest
    core["wall_time_s"] = round(wall, 3)
    _write_json(outdir / "manifest.json", core)


def _emit_densities(res, outdir: Path):
    import pandas as pd

    grid = np.linspace(res.u.min() - 1.0, res.u.max() + 1.0, 512)
    cols = {"u": grid}
    for lev in np.unique(res.z):
        mask_z = res.z == lev
        w_z = res.weight[mask_z].sum()
        for d in (0, 1):
            sub = mask_z & (res.d == d)
            label = f"f_z{res.z_levels[lev]}_d{d}"
            if not sub.any():
                cols[label] = np.zeros_like(grid)
                continue
            h = rule_of_thumb_bandwidth(res.u[sub], res.weight[sub])
            h = max(h, 1e-6)
            kern = np.exp(-0.5 * ((grid[:, None] - res.u[sub][None, :]) / h) ** 2)
            cols[label] = kern @ res.weight[sub] / (w_z * h * np.sqrt(2 * np.pi))
    pd.DataFrame(cols).to_csv(outdir / "densities.csv", index=False)


def _cmd_test(args) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ds = load_csv(args.data, _schema(args))
    cfg = TestConfig(
        xi=args.xi,
        s2_lo=args.s2_lo,
        s2_hi=args.s2_hi,
        n_boot=args.boot,
        multiplier=args.multiplier,
        interval_cap=args.interval_cap,
        seed=args.seed,
        boot_recenter=args.boot_recenter,
    )
    opts = _estimation_options(args)
    if args.method == "proposed":
        report = run_test_multivalued(ds, cfg, opts).to_dict()
    elif args.method == "no-covariates":
        report = test_no_covariates(ds, cfg).to_dict()
    else:
        report = test_binarized_pscore(ds, cfg, opts).to_dict()
    _write_json(outdir / "report.json", report)
    if args.emit_densities and args.method != "no-covariates":
        _, _, res = prepare_residuals(ds, opts)
        _emit_densities(res, outdir)
    _write_manifest(outdir, "test", {**report.get("config", {}), "method": args.method},
                    [args.data], args.seed, time.perf_counter() - start)
    print(json.dumps({k: report[k] for k in ("method", "T", "p_overall", "p_overall_display")}))
    return EXIT_OK


def _cmd_distill(args) -> int:
    import pandas as pd

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ds = load_csv(args.data, _schema(args))
    if ds.n_levels != 2:
        raise DataValidationError("distill subcommand requires a binary instrument")
    opts = _estimation_options_distill(args)
    _, _, res = prepare_residuals(ds, opts)
    sample = distill_pair(
        res.pscore,
        (res.z == 1).astype(int),
        res.weight,
        method=args.distill,
        pminus=_parse_interval(args.pminus),
        pplus=_parse_interval(args.pplus),
    )
    pd.DataFrame({"s1": sample.s1}).to_csv(outdir / "s1.csv", index=False)
    audit = {
        "algorithm": sample.algorithm,
        "d0": sample.d0,
        "d1": sample.d1,
        "j_minus": sample.j_minus,
        "j_plus": sample.j_plus,
        "trimmed_z0": sample.trimmed_z0,
        "trimmed_z1": sample.trimmed_z1,
        "pretrim_dropped": sample.pretrim_dropped,
        "outside_regions": sample.outside_regions,
        "pminus": list(sample.pminus_spec),
        "pplus": list(sample.pplus_spec),
        "retained": int(sample.s1.sum()),
    }
    _write_json(outdir / "audit.json", audit)
    _write_manifest(outdir, "distill", {"method": args.distill}, [args.data], args.seed,
                    time.perf_counter() - start)
    print(json.dumps(audit))
    return EXIT_OK


def _estimation_options_distill(args) -> EstimationOptions:
    return EstimationOptions(
        pscore_design=PropensityDesign(include_interactions=not args.no_interactions),
        phi=args.phi,
        pooled_outcome=args.pooled_outcome,
        distill=args.distill,
    )


def _cmd_simulate(args) -> int:
    from .mcstudy import MC_ESTIMATION

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    reps = 1000 if args.full else args.reps
    boot = 500 if args.full else args.boot
    cfg = TestConfig(xi=args.xi, n_boot=boot, seed=args.seed)
    spec = DgpSpec(kind=args.dgp, n=args.n, gamma_mode=args.gamma, delta_mode=args.delta)
    methods = tuple(m for m in args.methods.split(",") if m)
    if args.component_study:
        table = component_study([spec], cfg, R=reps, seed=args.seed, threads=args.threads,
                                fix_params=args.fix_params, opts=MC_ESTIMATION)
    else:
        table = rejection_study([spec], methods, cfg, R=reps, seed=args.seed,
                                threads=args.threads, fix_params=args.fix_params,
                                opts=MC_ESTIMATION)
    table.to_csv(outdir / "rejection.csv")
    (outdir / "rejection.txt").write_text(table.to_text() + "\n")
    config = {
        "dgp": args.dgp, "n": args.n, "reps": reps, "boot": boot, "xi": args.xi,
        "methods": list(methods), "gamma": args.gamma, "delta": args.delta,
        "fix_params": args.fix_params, "component_study": args.component_study,
    }
    _write_manifest(outdir, "simulate", config, [], args.seed, time.perf_counter() - start)
    print(table.to_text())
    return EXIT_OK


def _cmd_oracle(args) -> int:
    import pandas as pd

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    params = ExampleParams(nu=args.nu, alpha=args.alpha, mu1=args.mu1, mu0=args.mu0)
    if args.grid == "coarse":
        rho_grid = np.round(np.arange(-0.8, 0.81, 0.2), 10)
        dd_grid = np.round(np.arange(0.5, 4.01, 0.5), 10)
    else:
        rho_grid, dd_grid = default_grid()
    pairs = violation_map(params, rho_grid, dd_grid, u_points=args.u_points)
    frame = pd.DataFrame(
        {
            "rho_delta": [p.rho_delta for p in pairs],
            "dd": [p.dd for p in pairs],
            "nesting_violation": [p.nesting_violation for p in pairs],
            "distilled_violation": [p.distilled_violation for p in pairs],
            "region": [p.region for p in pairs],
        }
    )
    frame.to_csv(outdir / "oracle.csv", index=False)
    config = {"grid": args.grid, "nu": args.nu, "alpha": args.alpha,
              "mu1": args.mu1, "mu0": args.mu0, "u_points": args.u_points}
    _write_manifest(outdir, "oracle", config, [], args.seed, time.perf_counter() - start)
    print(f"wrote {len(pairs)} grid points to {outdir / 'oracle.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "test":
            return _cmd_test(args)
        if args.command == "distill":
            return _cmd_distill(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ProbitError, OracleError, DistillationInfeasibleError, np.linalg.LinAlgError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
