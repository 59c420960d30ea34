"""Sieve variance, pointwise intervals, and multiplier bootstrap bands.

The variance estimator sandwiches the squared weighted residuals between
inverses of the unweighted Gram, while the bootstrap process uses the
weighted Gram, both exactly as the estimator prescribes. Bootstrap
draws perturb the score terms (Y_i * omega_i - ghat(X_i)) by mean-zero,
unit-variance multipliers and never refit the first stage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .basis import design_matrix
from .errors import NumericalError
from .estimator import FpwFit
from .linalg import factor_gram

__all__ = [
    "UniformBand",
    "sieve_variance",
    "pointwise_ci",
    "multiplier_draw",
    "uniform_band",
    "default_band_grid",
]

MULTIPLIERS = ("normal", "rademacher", "mammen")

# Mammen two-point distribution: mean 0, variance 1, third moment 1
_MAMMEN_LOW = (1.0 - np.sqrt(5.0)) / 2.0
_MAMMEN_HIGH = (1.0 + np.sqrt(5.0)) / 2.0
_MAMMEN_P_LOW = (1.0 + np.sqrt(5.0)) / (2.0 * np.sqrt(5.0))


@dataclass
class UniformBand:
    """Uniform confidence band over an evaluation grid."""

    grid: np.ndarray
    estimates: np.ndarray
    se: np.ndarray
    critical_value: float
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    n_boot: int
    multiplier: str
    dropped: np.ndarray | None = None


def _eval_vector(fit: FpwFit, x: float, controls=None) -> np.ndarray:
    e = design_matrix(np.atleast_1d(float(x)), fit.spec_p)[0]
    if fit.control_coefs.size:
        if controls is None:
            controls = fit.control_reference
        controls = np.asarray(controls, dtype=float)
        if controls.shape != (fit.control_coefs.size,):
            raise ValueError("control dimension mismatch")
        e = np.concatenate([e, controls])
    return e


def _score_mid(fit: FpwFit) -> np.ndarray:
    # (1/n) sum over selected of d_i (uhat_i * omega_i)^2 d_i'
    s = fit.residuals * fit.weights
    d = fit.design_sel
    return d.T @ (s[:, None] ** 2 * d) / fit.n


def sieve_variance(fit: FpwFit, x: float, controls=None) -> float:
    """Plug-in sieve variance at a point (>= 0 by construction).

    On fits with controls the evaluation vector is padded with the given
    control values, defaulting to the selected-sample mean.
    """
    core = getattr(fit, "_var_core", None)
    if core is None:
        fac = factor_gram(fit.gram_unweighted)
        half = fac.solve(_score_mid(fit))  # Gu^{-1} mid
        core = fac.solve(half.T).T  # Gu^{-1} mid Gu^{-1}
        core = 0.5 * (core + core.T)
        fit._var_core = core
    e = _eval_vector(fit, x, controls)
    return max(0.0, float(e @ core @ e))


def pointwise_ci(fit: FpwFit, x: float, alpha: float, controls=None):
    """Asymptotic-normal interval ghat(x) +/- z_{1-alpha/2} sqrt(vhat/n)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    e = _eval_vector(fit, x, controls)
    est = float(e @ fit.coefs)
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(sieve_variance(fit, x, controls) / fit.n)
    return est - half, est + half


def multiplier_draw(dist: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. multipliers with mean 0 and variance 1."""
    if dist == "normal":
        return rng.standard_normal(n)
    if dist == "rademacher":
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if dist == "mammen":
        return np.where(rng.random(n) < _MAMMEN_P_LOW, _MAMMEN_LOW, _MAMMEN_HIGH)
    raise ValueError(f"unknown multiplier distribution {dist!r}")


def default_band_grid(fit: FpwFit, n_points: int = 101) -> np.ndarray:
    """Equispaced grid over the central 90% of the observed covariate."""
    lo, hi = np.quantile(fit.x_sel, [0.05, 0.95])
    return np.linspace(lo, hi, n_points)


def uniform_band(
    fit: FpwFit,
    grid,
    alpha: float = 0.05,
    n_boot: int = 1000,
    dist: str = "mammen",
    rng: np.random.Generator | None = None,
    controls=None,
) -> UniformBand:
    """Multiplier-bootstrap uniform confidence band over ``grid``.

    The critical value is the (1 - alpha) empirical quantile of the
    supremum over the grid of |Z^B|, where each bootstrap draw perturbs
    the selected-unit scores by fresh multipliers. Grid points with zero
    estimated variance are dropped from the supremum with a warning.
    Fixed draw and summation order make the band reproducible per seed.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    if dist not in MULTIPLIERS:
        raise ValueError(f"multiplier must be one of {MULTIPLIERS}")
    if rng is None:
        rng = np.random.default_rng(0)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("grid must be nonempty")

    m = grid.size
    evec = np.stack([_eval_vector(fit, x, controls) for x in grid])
    est = evec @ fit.coefs
    v = np.array([sieve_variance(fit, x, controls) for x in grid])
    se = np.sqrt(v / fit.n)

    keep = v > 0.0
    if not np.all(keep):
        warnings.warn(
            f"dropping {int((~keep).sum())} grid points with zero variance "
            "from the supremum",
            stacklevel=2,
        )
    if not np.any(keep):
        raise NumericalError("sieve variance vanished on the whole grid")

    gw = factor_gram(fit.gram_weighted)
    proj = gw.solve(evec[keep].T).T  # rows: p(x)' (X'wX/n)^{-1}
    score = fit.design_sel * (fit.y_sel * fit.weights - fit.fitted)[:, None]
    M = (proj @ score.T) / np.sqrt(fit.n * v[keep])[:, None]

    eps = multiplier_draw(dist, n_boot * score.shape[0], rng).reshape(
        n_boot, score.shape[0]
    )
    sups = np.abs(M @ eps.T).max(axis=0)
    crit = float(np.quantile(sups, 1.0 - alpha))

    return UniformBand(
        grid=grid,
        estimates=est,
        se=se,
        critical_value=crit,
        lower=est - crit * se,
        upper=est + crit * se,
        alpha=alpha,
        n_boot=n_boot,
        multiplier=dist,
        dropped=None if np.all(keep) else grid[~keep],
    )
