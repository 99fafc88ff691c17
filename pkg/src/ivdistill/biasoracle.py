"""Analytic oracle for a Gaussian example process with an invalid instrument.

The process has a direct instrument effect of size nu on the outcome, a
probit-style selection equation whose covariate index differs by
instrument value, and jointly normal unobservables.  Everything about the
asymptotic partial-residual subdensities can then be computed by
deterministic quadrature:

* the propensity-score density conditional on the instrument is Gaussian in
  t = Phi^{-1}(p), so score-space integrals become one-dimensional;
* the asymptotic bias of the outcome-coefficient estimates lives in the
  span of the two selection directions, and the scalar products of the bias
  with those directions follow from a 4x4 linear system whose entries are
  scalar quadratures; consequently the subdensities depend on the selection
  directions only through their common squared length ``dd`` and their
  normalized inner product ``rho_delta``;
* conditional on the score and the instrument, the subdensity of the
  partial residual and a treatment arm is a Gaussian density times a normal
  cdf (the selection shock integrates out in closed form).

The violation map evaluates, over a grid of (rho_delta, dd), the largest
interval violation of the nesting inequality for score-median bins versus
instrument-value conditioning on the (here untrimmed) distilled sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr
from scipy.stats import norm

_QUAD_OPTS = {"epsabs": 1e-12, "epsrel": 1e-11, "limit": 200}
COND_LIMIT = 1e12


class OracleError(RuntimeError):
    """Raised on ill-conditioned systems or failed quadrature."""


@dataclass(frozen=True)
class ExampleParams:
    """Parameters of the example process.

    ``dd`` is the squared length shared by the two selection directions and
    ``rho_delta`` their normalized inner product.  The unobservables
    (selection shock, treated and untreated outcome errors) are jointly
    normal with unit selection variance, means (0, mu1, mu0), standard
    deviations (1, sigma1, sigma0) and correlations rho_d1, rho_d0, rho_10.
    """

    nu: float = 0.2
    alpha: float = 0.3
    dd: float = 2.0
    rho_delta: float = 0.0
    mu1: float = 0.3
    mu0: float = 0.0
    sigma1: float = 1.0
    sigma0: float = 1.0
    rho_d1: float = 0.3
    rho_d0: float = 0.2
    rho_10: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.dd <= 0:
            raise ValueError("dd must be positive")
        if not -1.0 <= self.rho_delta <= 1.0:
            raise ValueError("rho_delta must lie in [-1, 1]")
        if min(np.linalg.eigvalsh(self.sigma_matrix())) <= 0:
            raise ValueError("unobservable covariance matrix is not positive definite")

    def sigma_matrix(self) -> np.ndarray:
        s1, s0 = self.sigma1, self.sigma0
        return np.array(
            [
                [1.0, s1 * self.rho_d1, s0 * self.rho_d0],
                [s1 * self.rho_d1, s1**2, s1 * s0 * self.rho_10],
                [s0 * self.rho_d0, s1 * s0 * self.rho_10, s0**2],
            ]
        )

    def delta_vectors(self, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
        """Concrete selection directions with the stated geometry."""
        if k < 2:
            raise ValueError("need at least two covariates")
        root = math.sqrt(self.dd)
        d1 = np.zeros(k)
        d1[0] = root
        d0 = np.zeros(k)
        d0[0] = self.rho_delta * root
        d0[1] = math.sqrt(max(1.0 - self.rho_delta**2, 0.0)) * root
        return d1, d0


@dataclass
class PscoreLaws:
    """Closed-form propensity-score laws, evaluated via t = Phi^{-1}(p)."""

    params: ExampleParams

    def joint_density(self, p, z):
        """f(p, Z=z)."""
        p = np.asarray(p, dtype=float)
        t = norm.ppf(p)
        a, dd = self.params.alpha, self.params.dd
        sign = 1.0 if z == 1 else -1.0
        num = 0.5 * norm.pdf(t, loc=sign * a, scale=math.sqrt(dd))
        return num / norm.pdf(t)

    def density(self, p):
        """f(p) = f(p, Z=0) + f(p, Z=1)."""
        return self.joint_density(p, 0) + self.joint_density(p, 1)

    def pr_z1(self, p):
        """Pr(Z=1 | p) = 1/2 + tanh(alpha * Phi^{-1}(p) / dd) / 2."""
        t = norm.ppf(np.asarray(p, dtype=float))
        return 0.5 + 0.5 * np.tanh(self.params.alpha * t / self.params.dd)

    # t-space weights: f(p, Z=z) dp = t_weight(t, z) dt
    def t_weight(self, t, z):
        sign = 1.0 if z == 1 else -1.0
        return 0.5 * norm.pdf(t, loc=sign * self.params.alpha, scale=math.sqrt(self.params.dd))

    def pr_z1_t(self, t):
        return 0.5 + 0.5 * np.tanh(self.params.alpha * np.asarray(t, dtype=float) / self.params.dd)


def pscore_laws(params: ExampleParams) -> PscoreLaws:
    return PscoreLaws(params)


@dataclass
class BiasScalars:
    """Scalar products of the asymptotic coefficient bias with the selection
    directions, plus every intermediate constant of the reduction."""

    params: ExampleParams
    w1: float
    w0: float
    a: tuple[float, float, float, float]
    b: tuple[float, float, float]
    cde: dict
    E: np.ndarray
    F: np.ndarray
    f: dict
    omega: dict
    t1d1: float
    t1d0: float
    t0d1: float
    t0d0: float
    H1: float
    H0: float
    tt1: float
    tt0: float
    cond_E: float


def _integrate(fn) -> float:
    val, _ = quad(fn, -np.inf, np.inf, **_QUAD_OPTS)
    if not math.isfinite(val):
        raise OracleError("quadrature failed to converge")
    return val


@lru_cache(maxsize=4096)
def _integral_constants(alpha: float, dd: float) -> tuple:
    """Quadrature constants of the reduction; they do not involve rho_delta."""
    sd = math.sqrt(dd)

    def I(h):
        def fn(t):
            p = ndtr(t)
            pr1 = 0.5 + 0.5 * math.tanh(alpha * t / dd)
            ft = 0.5 * (
                math.exp(-0.5 * ((t - alpha) / sd) ** 2) + math.exp(-0.5 * ((t + alpha) / sd) ** 2)
            ) / (sd * math.sqrt(2 * math.pi))
            return h(t, p, pr1) * ft

        return _integrate(fn)

    a1 = I(lambda t, p, q: p * p)
    a2 = -I(lambda t, p, q: p * p * q) / dd + I(lambda t, p, q: p * p * q * (1 - q) * (t - alpha) ** 2) / dd**2
    a3 = -I(lambda t, p, q: p * p * (1 - q)) / dd + I(lambda t, p, q: p * p * q * (1 - q) * (t + alpha) ** 2) / dd**2
    a4 = I(lambda t, p, q: p * p * q * (1 - q) * (alpha**2 - t * t)) / dd**2
    b1 = I(lambda t, p, q: p * (1 - p))
    b2 = -I(lambda t, p, q: p * (1 - p) * q) / dd + I(
        lambda t, p, q: p * (1 - p) * q * (1 - q) * (t * t + alpha**2)
    ) / dd**2
    b3 = I(lambda t, p, q: p * (1 - p) * q * (1 - q) * (alpha**2 - t * t)) / dd**2
    w1 = I(lambda t, p, q: p * q * (1 - q) * (t - alpha)) / dd
    w0 = -I(lambda t, p, q: p * q * (1 - q) * (t + alpha)) / dd
    return a1, a2, a3, a4, b1, b2, b3, w1, w0


def _gram_norm(dot1, dot0, dd, rho):
    """Squared length of a vector in span{d1, d0} from its two inner products."""
    gram = dd * np.array([[1.0, rho], [rho, 1.0]])
    coef, *_ = np.linalg.lstsq(gram, np.array([dot1, dot0]), rcond=None)
    return float(coef @ np.array([dot1, dot0]))


def bias_scalars(params: ExampleParams) -> BiasScalars:
    """Compute the bias scalar products and the two summary functions.

    All one-dimensional integrals run to tolerance ~1e-11; the 4x4 system is
    checked for conditioning before inversion.
    """
    a_, dd, rho = params.alpha, params.dd, params.rho_delta
    a1, a2, a3, a4, b1, b2, b3, w1, w0 = _integral_constants(a_, dd)

    c0 = a3 * rho * dd + a4 * dd
    c1 = a1 + a2 * dd + rho * dd * a4
    d0 = a2 * rho * dd + a4 * dd
    d1 = a1 + a3 * dd + rho * dd * a4
    e0 = b2 * rho * dd + b3 * dd
    e1 = b1 + b2 * dd + b3 * rho * dd

    E1 = np.array([[c1, c0], [e1, e0]])
    E2 = np.array([[e1, e0], [d1, d0]])
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    E = np.block([[E1, E2], [P @ E2 @ P, P @ E1 @ P]])
    cond = float(np.linalg.cond(E))
    if not math.isfinite(cond) or cond > COND_LIMIT:
        raise OracleError(
            f"coefficient system is ill-conditioned (cond={cond:.3g}) at "
            f"rho_delta={rho}, dd={dd}, alpha={a_}"
        )
    F = np.linalg.inv(E)
    f = {
        "f11": F[0, 0], "f12": F[0, 1], "f13": F[0, 2], "f14": F[0, 3],
        "f21": F[1, 0], "f22": F[1, 1], "f23": F[1, 2], "f24": F[1, 3],
    }

    def pair(x, y):  # (x + y * rho) * dd
        return (x + y * rho) * dd

    omega = {
        ("d1", 1, "d1"): pair(f["f11"], f["f13"]),
        ("d0", 1, "d0"): pair(f["f23"], f["f21"]),
        ("d0", 1, "d1"): pair(f["f21"], f["f23"]),
        ("d1", 1, "d0"): pair(f["f13"], f["f11"]),
        ("d1", 2, "d1"): pair(f["f12"], f["f14"]),
        ("d1", "2T", "d1"): pair(f["f24"], f["f22"]),
        ("d1", 2, "d0"): pair(f["f14"], f["f12"]),
        ("d0", "2T", "d1"): pair(f["f14"], f["f12"]),
        ("d0", 2, "d1"): pair(f["f22"], f["f24"]),
        ("d1", "2T", "d0"): pair(f["f22"], f["f24"]),
        ("d0", 2, "d0"): pair(f["f24"], f["f22"]),
        ("d0", "2T", "d0"): pair(f["f12"], f["f14"]),
    }
    # products with the third block follow from the symmetry of the system
    omega[("d1", 3, "d1")] = omega[("d0", 1, "d0")]
    omega[("d0", 3, "d0")] = omega[("d1", 1, "d1")]
    omega[("d1", 3, "d0")] = omega[("d0", 1, "d1")]
    omega[("d0", 3, "d1")] = omega[("d1", 1, "d0")]

    def H(left, blk_a, blk_b):
        return -2.0 * (
            w1 * omega[(left, blk_a, "d1")]
            + w0 * omega[(left, blk_a, "d0")]
            + w1 * omega[(left, blk_b, "d0")]
            + w0 * omega[(left, blk_b, "d1")]
        )

    H1 = H("d1", 1, 2)
    H0 = H("d0", 1, 2)
    H1_low = H("d1", "2T", 3)  # bias of the untreated coefficients
    H0_low = H("d0", "2T", 3)

    nu = params.nu
    t1d1, t1d0 = H1 * nu, H0 * nu
    t0d1, t0d0 = H1_low * nu, H0_low * nu
    tt1 = _gram_norm(t1d1, t1d0, dd, rho)
    tt0 = _gram_norm(t0d1, t0d0, dd, rho)
    return BiasScalars(
        params=params,
        w1=w1,
        w0=w0,
        a=(a1, a2, a3, a4),
        b=(b1, b2, b3),
        cde={"c0": c0, "c1": c1, "d0": d0, "d1": d1, "e0": e0, "e1": e1},
        E=E,
        F=F,
        f=f,
        omega=omega,
        t1d1=t1d1,
        t1d0=t1d0,
        t0d1=t0d1,
        t0d0=t0d0,
        H1=H1,
        H0=H0,
        tt1=tt1,
        tt0=tt0,
        cond_E=cond,
    )


# ---------------------------------------------------------------------------
# Residual subdensities


def _arm_constants(params: ExampleParams, scalars: BiasScalars, d: int):
    if d == 1:
        mu, sig, rho_d = params.mu1, params.sigma1, params.rho_d1
        dot1, dot0, tt = scalars.t1d1, scalars.t1d0, scalars.tt1
    else:
        mu, sig, rho_d = params.mu0, params.sigma0, params.rho_d0
        dot1, dot0, tt = scalars.t0d1, scalars.t0d0, scalars.tt0
    slope = sig * rho_d
    base_var = sig**2 * (1.0 - rho_d**2)
    return mu, slope, base_var, dot1, dot0, tt


def _density_pz(params, scalars, u, t, z, d):
    """f(U=u, D=d | p=Phi(t), Z=z); u and t broadcast against each other."""
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    mu, slope, base_var, dot1, dot0, tt = _arm_constants(params, scalars, d)
    dd = params.dd
    if z == 1:
        shift = (dot1 / dd) * (t - params.alpha)
        dot_z = dot1
    else:
        shift = (dot0 / dd) * (t + params.alpha)
        dot_z = dot0
    noise_var = base_var + tt - dot_z**2 / dd
    noise_var = max(noise_var, 0.0)
    mean = (params.nu if z == 1 else -params.nu) + mu + shift
    total_var = slope**2 + noise_var
    total_sd = math.sqrt(total_var)
    zval = (u - mean) / total_sd
    pdf = np.exp(-0.5 * zval * zval) / (total_sd * math.sqrt(2.0 * math.pi))
    cond_mean = slope * (u - mean) / total_var
    cond_sd = math.sqrt(max(noise_var / total_var, 1e-300))
    if d == 1:
        factor = ndtr((t + cond_mean) / cond_sd)
    else:
        factor = ndtr((-t - cond_mean) / cond_sd)
    return pdf * factor


def _t_nodes(params, n_nodes, lo=None, hi=None):
    span = params.alpha + 8.0 * math.sqrt(params.dd)
    lo = -span if lo is None else lo
    hi = span if hi is None else hi
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w
    return nodes, weights


def residual_subdensity(
    params: ExampleParams,
    scalars: BiasScalars,
    u,
    d: int = 1,
    z: int | None = None,
    p: float | None = None,
    region: str | None = None,
    n_nodes: int = 400,
):
    """Subdensity of (U, D=d) under the stated conditioning.

    Exactly one conditioning applies: ``p`` with ``z`` (score and
    instrument), ``z`` alone (instrument only, integrating the score law;
    the process satisfies dominance, so the full sample is the distilled
    sample), or ``region`` in {'minus', 'plus'} (score below or above its
    median, integrating both instrument values).
    """
    if d not in (0, 1):
        raise ValueError("d must be 0 or 1")
    u = np.asarray(u, dtype=float)
    laws = pscore_laws(params)
    if p is not None:
        if z is None:
            raise ValueError("conditioning on p requires z")
        t = float(norm.ppf(p))
        return _density_pz(params, scalars, u, t, z, d)
    if region is None and z is not None:
        nodes, weights = _t_nodes(params, n_nodes)
        dens = _density_pz(params, scalars, u[:, None], nodes[None, :], z, d)
        w_t = laws.t_weight(nodes, z)  # f(p, Z=z) dp in t-space
        mass = float(np.sum(weights * w_t))
        return (dens * (weights * w_t)[None, :]).sum(axis=1) / mass
    if region in ("minus", "plus"):
        # the score density is symmetric about 1/2, so the median is at t=0
        lo, hi = (None, 0.0) if region == "minus" else (0.0, None)
        nodes, weights = _t_nodes(params, n_nodes, lo=lo, hi=hi)
        acc = np.zeros(u.shape)
        mass = 0.0
        for zz in (0, 1):
            w_t = laws.t_weight(nodes, zz)
            dens = _density_pz(params, scalars, u[:, None], nodes[None, :], zz, d)
            acc += (dens * (weights * w_t)[None, :]).sum(axis=1)
            mass += float(np.sum(weights * w_t))
        return acc / mass
    raise ValueError("specify (p, z), z alone, or region in {'minus', 'plus'}")


# ---------------------------------------------------------------------------
# Violation map


@dataclass
class ViolationPair:
    rho_delta: float
    dd: float
    nesting_violation: float
    distilled_violation: float
    nesting_interval: tuple[float, float]
    distilled_interval: tuple[float, float]
    region: str


def _max_interval(values: np.ndarray, du: float, grid: np.ndarray):
    """Largest contiguous sum of values*du (at least one cell), with bounds."""
    best = -np.inf
    cur = 0.0
    start = 0
    bi = bj = 0
    for i, v in enumerate(values * du):
        if cur <= 0.0:
            cur = v
            start = i
        else:
            cur += v
        if cur > best:
            best, bi, bj = cur, start, i
    return float(best), (float(grid[bi]), float(grid[bj]))


def _u_grid(params, scalars, n_points):
    centers = []
    spreads = []
    for z in (0, 1):
        mu, slope, base_var, dot1, dot0, tt = _arm_constants(params, scalars, 1)
        dot_z = dot1 if z == 1 else dot0
        noise = max(base_var + tt - dot_z**2 / params.dd, 0.0)
        var = slope**2 + noise + (dot_z**2 / params.dd)  # includes the score-driven shift
        centers.append((params.nu if z == 1 else -params.nu) + mu)
        spreads.append(math.sqrt(var))
    center = 0.5 * (centers[0] + centers[1])
    half = 6.0 * max(spreads) + abs(centers[1] - centers[0])
    return np.linspace(center - half, center + half, n_points)


def violation_pair(params: ExampleParams, u_points: int = 400, n_nodes: int = 400,
                   scalars: BiasScalars | None = None) -> ViolationPair:
    """Nesting-versus-distilled violation maxima at one parameter point."""
    if scalars is None:
        scalars = bias_scalars(params)
    grid = _u_grid(params, scalars, u_points)
    du = grid[1] - grid[0]
    dens_minus = residual_subdensity(params, scalars, grid, d=1, region="minus", n_nodes=n_nodes)
    dens_plus = residual_subdensity(params, scalars, grid, d=1, region="plus", n_nodes=n_nodes)
    dens_z0 = residual_subdensity(params, scalars, grid, d=1, z=0, n_nodes=n_nodes)
    dens_z1 = residual_subdensity(params, scalars, grid, d=1, z=1, n_nodes=n_nodes)
    nesting, nest_iv = _max_interval(dens_minus - dens_plus, du, grid)
    distilled, dist_iv = _max_interval(dens_z0 - dens_z1, du, grid)
    if distilled >= nesting >= 0.0:
        region = "distilled>nesting>=0"
    elif distilled > 0.0 > nesting:
        region = "distilled>0>nesting"
    else:
        region = "other"
    return ViolationPair(
        rho_delta=params.rho_delta,
        dd=params.dd,
        nesting_violation=nesting,
        distilled_violation=distilled,
        nesting_interval=nest_iv,
        distilled_interval=dist_iv,
        region=region,
    )


def default_grid() -> tuple[np.ndarray, np.ndarray]:
    rho = np.round(np.arange(-0.95, 0.951, 0.05), 10)
    dd = np.round(np.arange(0.1, 4.001, 0.1), 10)
    return rho, dd


def violation_map(
    params: ExampleParams = ExampleParams(),
    rho_grid=None,
    dd_grid=None,
    u_points: int = 400,
    n_nodes: int = 400,
) -> list[ViolationPair]:
    """Violation maxima on a (rho_delta, dd) grid, row-major in (rho, dd)."""
    rho_default, dd_default = default_grid()
    rho_grid = rho_default if rho_grid is None else np.asarray(rho_grid, dtype=float)
    dd_grid = dd_default if dd_grid is None else np.asarray(dd_grid, dtype=float)
    out = []
    for rho in rho_grid:
        for dd in dd_grid:
            pt = replace(params, rho_delta=float(rho), dd=float(dd))
            out.append(violation_pair(pt, u_points=u_points, n_nodes=n_nodes))
    return out
