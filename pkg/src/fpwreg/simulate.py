"""Monte Carlo studies: data generation, estimator comparisons, rates.

The synthetic design draws a latent uniform covariate and instrument
from a bivariate Gaussian copula with correlation rho, an additive
Gaussian regression error, and a selection indicator whose probability
depends on both the latent covariate and the regression error:

    w = Phi(xi),  x* = Phi(chi),  chi = rho xi + sqrt(1 - rho^2) nu
    y = g(x*) + u,  g(x) = Phi(c_g (x - 0.5)),  u ~ N(0, sigma_u2)
    delta ~ Bernoulli(Phi(1 + chi + u / selection_scale))

Per-replication RNG streams are derived from the master seed by a
counter-based scheme (SeedSequence with the replication index as spawn
key), so results are reproducible regardless of execution order.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .basis import BasisSpec, design_matrix, spec_from_data
from .errors import NumericalError
from .estimator import fit_fpw_series, fit_linear
from .linalg import least_squares
from .sample import Sample
from .selection import MdConfig, estimate_selection_probability

__all__ = [
    "DgpConfig",
    "SimulatedData",
    "StudyResult",
    "RateResult",
    "simulate_dgp",
    "run_nonlinear_study",
    "run_linear_study",
    "rate_experiment",
    "true_g",
    "rep_rng",
    "write_linear_csv",
    "write_curves_csv",
]

LINEAR_TRUTH = np.array([1.0, 3.0])  # intercept, slope of the linear design
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the simulation design."""

    n: int = 1000
    rho: float = 0.2
    sigma_u2: float = 1.0
    c_g: float = 5.0
    selection_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if self.sigma_u2 <= 0:
            raise ValueError("sigma_u2 must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.selection_scale <= 0:
            raise ValueError("selection_scale must be positive")


@dataclass(frozen=True)
class SimulatedData:
    """A drawn sample plus the oracle quantities used only for evaluation."""

    sample: Sample
    x_star: np.ndarray
    u: np.ndarray
    g_true: np.ndarray
    selection_prob: np.ndarray


@dataclass
class StudyResult:
    """Aggregated Monte Carlo output.

    Linear studies fill ``linear_rows`` (one dict per estimator and
    coefficient with abs_median_bias and coverage); nonlinear studies
    fill ``curves`` (one dict per estimator with median and pointwise
    replication quantiles on the grid). Curve quantiles are pointwise
    2.5/97.5% quantiles of the estimator across replications.
    """

    reps_requested: int
    reps_used: int
    n_failed: int
    runtime_s: float
    linear_rows: list[dict] = field(default_factory=list)
    grid: np.ndarray | None = None
    truth: np.ndarray | None = None
    curves: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def true_g(x, c_g: float) -> np.ndarray:
    """Regression function Phi(c_g (x - 0.5)) of the nonlinear design."""
    return norm.cdf(c_g * (np.asarray(x, dtype=float) - 0.5))


def rep_rng(seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one replication of one study."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream, rep))
    )


def simulate_dgp(
    cfg: DgpConfig,
    rng: np.random.Generator | None = None,
    linear: bool = False,
) -> SimulatedData:
    """Draw one sample; ``linear=True`` swaps in y = 1 + 3 x* + u."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    xi = rng.standard_normal(cfg.n)
    nu = rng.standard_normal(cfg.n)
    chi = cfg.rho * xi + np.sqrt(1.0 - cfg.rho**2) * nu
    w = norm.cdf(xi)
    x_star = norm.cdf(chi)
    u = np.sqrt(cfg.sigma_u2) * rng.standard_normal(cfg.n)
    if linear:
        g_vals = LINEAR_TRUTH[0] + LINEAR_TRUTH[1] * x_star
    else:
        g_vals = true_g(x_star, cfg.c_g)
    y = g_vals + u
    p_sel = norm.cdf(1.0 + chi + u / cfg.selection_scale)
    delta = (rng.random(cfg.n) < p_sel).astype(int)
    x = np.where(delta == 1, x_star, np.nan)
    sample = Sample(delta=delta, y=y, x=x, w=w)
    return SimulatedData(
        sample=sample, x_star=x_star, u=u, g_true=g_vals, selection_prob=p_sel
    )


def _first_stage_config(md_cfg: MdConfig | None) -> MdConfig:
    # tensor of quadratic splines with zero interior knots (dimension 9)
    return md_cfg if md_cfg is not None else MdConfig()


def second_stage_spec(sample: Sample, c_g: float = 5.0) -> BasisSpec:
    """Quadratic basis with 2 knots (dimension 5), or 7 knots when the
    regression is steep (c_g = 20, dimension 10)."""
    n_interior = 7 if c_g >= 20 else 2
    return spec_from_data(sample.x_observed, degree=2, n_interior=n_interior)


def _check_failures(reps: int, failures: int):
    if reps == 0 or failures / reps > MAX_FAILURE_RATE:
        raise NumericalError(
            f"{failures} of {reps} replications failed (limit {MAX_FAILURE_RATE:.0%})"
        )


def run_nonlinear_study(
    cfg: DgpConfig,
    reps: int,
    spec_p: BasisSpec | None = None,
    md_cfg: MdConfig | None = None,
    grid=None,
) -> StudyResult:
    """FPW vs listwise-deletion series estimation of the regression curve.

    Aggregates pointwise medians and 2.5/97.5% replication quantiles of
    both estimators over ``grid``. Replications that fail numerically
    (or whose first stage does not converge) are dropped and counted.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    md_cfg = _first_stage_config(md_cfg)
    if grid is None:
        grid = np.linspace(0.1, 0.9, 81)
    grid = np.asarray(grid, dtype=float)

    t0 = time.perf_counter()
    fpw_curves, mar_curves = [], []
    failures = 0
    for rep in range(reps):
        rng = rep_rng(cfg.seed, rep, stream=1)
        data = simulate_dgp(cfg, rng)
        sample = data.sample
        try:
            phi = estimate_selection_probability(sample, md_cfg)
            if not phi.converged:
                raise NumericalError("first stage did not converge")
            sp = spec_p if spec_p is not None else second_stage_spec(sample, cfg.c_g)
            fit = fit_fpw_series(sample, phi, sp)
            pg = design_matrix(grid, sp)
            fpw_curves.append(pg @ fit.gamma)
            mar_coefs = least_squares(
                design_matrix(sample.x_observed, sp), sample.y[sample.selected]
            )
            mar_curves.append(pg @ mar_coefs)
        except (NumericalError, np.linalg.LinAlgError):
            failures += 1
    used = reps - failures
    _check_failures(reps, failures)

    result = StudyResult(
        reps_requested=reps,
        reps_used=used,
        n_failed=failures,
        runtime_s=time.perf_counter() - t0,
        grid=grid,
        truth=true_g(grid, cfg.c_g),
        metadata={
            "dgp": cfg,
            "envelope": "pointwise replication quantiles (2.5%, 97.5%)",
        },
    )
    for name, curves in (("FPW", fpw_curves), ("MAR", mar_curves)):
        arr = np.asarray(curves)
        result.curves[name] = {
            "median": np.median(arr, axis=0),
            "q025": np.quantile(arr, 0.025, axis=0),
            "q975": np.quantile(arr, 0.975, axis=0),
        }
    return result


def run_linear_study(
    cfg: DgpConfig,
    reps: int,
    md_cfg: MdConfig | None = None,
    spec_p_interior: int = 2,
) -> StudyResult:
    """Absolute median bias and 95% coverage of the four linear estimators."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    md_cfg = _first_stage_config(md_cfg)
    modes = ("FPW", "IPW", "MAR", "FULL")

    t0 = time.perf_counter()
    estimates = {m: [] for m in modes}
    covered = {m: [] for m in modes}
    failures = 0
    for rep in range(reps):
        rng = rep_rng(cfg.seed, rep, stream=2)
        data = simulate_dgp(cfg, rng, linear=True)
        sample = data.sample
        full_sample = Sample(
            delta=np.ones(cfg.n, dtype=int), y=sample.y, x=data.x_star, w=sample.w
        )
        try:
            phi = estimate_selection_probability(sample, md_cfg)
            if not phi.converged:
                raise NumericalError("first stage did not converge")
            spec_p = spec_from_data(
                sample.x_observed, degree=2, n_interior=spec_p_interior
            )
            rep_est, rep_cov = {}, {}
            for mode in modes:
                target = full_sample if mode == "FULL" else sample
                fit = fit_linear(target, mode, phi=phi, spec_p=spec_p)
                half = 1.959963984540054 * fit.se
                rep_est[mode] = fit.coefs
                rep_cov[mode] = np.abs(fit.coefs - LINEAR_TRUTH) <= half
        except (NumericalError, np.linalg.LinAlgError):
            failures += 1
            continue
        for mode in modes:
            estimates[mode].append(rep_est[mode])
            covered[mode].append(rep_cov[mode])
    used = reps - failures
    _check_failures(reps, failures)

    result = StudyResult(
        reps_requested=reps,
        reps_used=used,
        n_failed=failures,
        runtime_s=time.perf_counter() - t0,
        metadata={"dgp": cfg, "truth": LINEAR_TRUTH.tolist()},
    )
    for mode in modes:
        est = np.asarray(estimates[mode])
        cov = np.asarray(covered[mode])
        for j, coef in enumerate(("beta0", "beta1")):
            result.linear_rows.append(
                {
                    "estimator": mode,
                    "coefficient": coef,
                    "abs_median_bias": float(
                        abs(np.median(est[:, j]) - LINEAR_TRUTH[j])
                    ),
                    "coverage": float(cov[:, j].mean()),
                }
            )
    return result


@dataclass
class RateResult:
    """Empirical convergence rate of the squared error on a fixed grid."""

    ns: np.ndarray
    median_errors: np.ndarray
    slope: float


def rate_experiment(
    ns,
    cfg: DgpConfig,
    reps: int,
    md_cfg: MdConfig | None = None,
    grid=None,
) -> RateResult:
    """Log-log regression of median squared grid error on sample size.

    The basis grows with n as dimension round(n^(1/5)) + degree. Needs at
    least 3 sample sizes.
    """
    ns = np.asarray(sorted(int(n) for n in ns))
    if ns.size < 3:
        raise ValueError("need at least 3 sample sizes")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    md_cfg = _first_stage_config(md_cfg)
    if grid is None:
        grid = np.linspace(0.1, 0.9, 81)
    grid = np.asarray(grid, dtype=float)
    truth = true_g(grid, cfg.c_g)

    medians = []
    for ni, n in enumerate(ns):
        degree = 2
        dim = int(round(n ** 0.2)) + degree
        n_interior = max(0, dim - degree - 1)
        errors = []
        failures = 0
        for rep in range(reps):
            rng = rep_rng(cfg.seed, rep, stream=10 + ni)
            data = simulate_dgp(replace(cfg, n=n), rng)
            sample = data.sample
            try:
                phi = estimate_selection_probability(sample, md_cfg)
                spec_p = spec_from_data(
                    sample.x_observed, degree=degree, n_interior=n_interior
                )
                fit = fit_fpw_series(sample, phi, spec_p)
                curve = design_matrix(grid, spec_p) @ fit.gamma
                errors.append(float(np.mean((curve - truth) ** 2)))
            except (NumericalError, np.linalg.LinAlgError):
                failures += 1
        _check_failures(reps, failures)
        medians.append(float(np.median(errors)))

    logn = np.log(ns.astype(float))
    loge = np.log(np.asarray(medians))
    slope = float(np.polyfit(logn, loge, 1)[0])
    return RateResult(ns=ns, median_errors=np.asarray(medians), slope=slope)


def write_linear_csv(result: StudyResult, path):
    """Table of (estimator, coefficient, abs_median_bias, coverage)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["estimator", "coefficient", "abs_median_bias", "coverage"]
        )
        writer.writeheader()
        for row in result.linear_rows:
            writer.writerow(row)


def write_curves_csv(result: StudyResult, path):
    """Long-format curve table (x, truth, median, q025, q975, estimator)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "truth", "median", "q025", "q975", "estimator"])
        for name, c in result.curves.items():
            for i, x in enumerate(result.grid):
                writer.writerow(
                    [x, result.truth[i], c["median"][i], c["q025"][i], c["q975"][i], name]
                )
