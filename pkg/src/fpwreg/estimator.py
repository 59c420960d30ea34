"""Second stage: fractional probability weights and the weighted series fit.

The weight attached to a selected observation is

    omega_i = 1 / (phi(Y_i, X_i) * hhat(X_i, phi)),

where hhat is the series projection of 1/phi onto the covariate basis.
The regression coefficients then solve the omega-weighted normal
equations, with the unweighted Gram appearing only inside hhat and the
weighted Gram outside, exactly as the estimator is defined. Linear
controls, when present, are appended to the design.

Also provides the weighted-OLS baselines (FPW / IPW / MAR / full data)
used in the linear-model comparison study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, design_matrix, spec_from_data
from .errors import NumericalError
from .linalg import factor_gram, least_squares, weighted_gram
from .sample import Sample
from .selection import SelectionModel, phi_eval

__all__ = [
    "FpwFit",
    "LinearFit",
    "h_hat",
    "fpw_weights",
    "fit_fpw_series",
    "predict",
    "fit_linear",
    "weighted_ols",
    "LINEAR_MODES",
]

LINEAR_MODES = ("FPW", "IPW", "MAR", "FULL")


@dataclass
class FpwFit:
    """Fitted FPW series regression with everything inference needs cached.

    ``gamma`` are the basis coefficients, ``control_coefs`` the linear
    control coefficients (empty without controls). Gram matrices carry
    the 1/n scaling with n the full sample size; rows of unselected
    units are zero by construction. ``weights``, ``residuals``,
    ``fitted``, ``y_sel``, ``x_sel`` and ``design_sel`` are aligned with
    the selected subsample.
    """

    gamma: np.ndarray
    control_coefs: np.ndarray
    spec_p: BasisSpec
    selection: SelectionModel | None
    weights: np.ndarray
    h_coefs: np.ndarray | None
    gram_unweighted: np.ndarray
    gram_weighted: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    y_sel: np.ndarray
    x_sel: np.ndarray
    controls_sel: np.ndarray | None
    design_sel: np.ndarray
    n: int
    clamp_count: int = 0
    used_pseudoinverse: bool = False

    @property
    def coefs(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.control_coefs])

    @property
    def control_reference(self) -> np.ndarray | None:
        """Mean controls over selected units (default evaluation point)."""
        if self.controls_sel is None:
            return None
        return self.controls_sel.mean(axis=0)


def h_hat(sample: Sample, phi: SelectionModel, spec_p: BasisSpec) -> np.ndarray:
    """Series LS coefficients of 1/phi(Y_i, X_i) on the covariate basis."""
    sel = sample.selected
    p_sel = design_matrix(sample.x[sel], spec_p)
    target = 1.0 / phi_eval(phi, sample.y[sel], sample.x[sel])
    return least_squares(p_sel, target)


def fpw_weights(
    sample: Sample,
    phi: SelectionModel,
    spec_p: BasisSpec,
    return_diagnostics: bool = False,
):
    """FPW weights 1/(phi * hhat) for each selected unit.

    Values above 1/floor^2 are clamped (the count is the diagnostic);
    a nonpositive hhat at a selected point signals a badly conditioned
    first stage and raises.
    """
    sel = sample.selected
    coefs = h_hat(sample, phi, spec_p)
    hvals = design_matrix(sample.x[sel], spec_p) @ coefs
    if np.any(hvals <= 0.0):
        raise NumericalError("hhat is nonpositive at a selected observation")
    phivals = phi_eval(phi, sample.y[sel], sample.x[sel])
    w = 1.0 / (phivals * hvals)
    cap = 1.0 / phi.floor**2
    clamp_count = int(np.count_nonzero(w > cap))
    w = np.minimum(w, cap)
    if return_diagnostics:
        return w, coefs, clamp_count
    return w


def _augmented_design(sample: Sample, spec_p: BasisSpec):
    """Full-sample design with zero rows for unselected units."""
    sel = sample.selected
    k = spec_p.dim
    c = sample.n_controls
    D = np.zeros((sample.n, k + c))
    D[sel, :k] = design_matrix(sample.x[sel], spec_p)
    if c:
        D[sel, k:] = sample.controls[sel]
    return D


def fit_fpw_series(
    sample: Sample,
    phi: SelectionModel,
    spec_p: BasisSpec,
    weights: np.ndarray | None = None,
) -> FpwFit:
    """Fit the FPW series regression of y on the covariate basis (+ controls).

    ``weights`` overrides the phi-derived FPW weights; this keeps the
    fit linear in y for fixed weights and is how preset-weight checks
    are run.
    """
    sel = sample.selected
    n = sample.n
    h_coefs = None
    clamp_count = 0
    if weights is None:
        weights, h_coefs, clamp_count = fpw_weights(
            sample, phi, spec_p, return_diagnostics=True
        )
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (sample.n_selected,):
            raise ValueError("weights must align with the selected subsample")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("weights must be positive and finite")

    D = _augmented_design(sample, spec_p)
    w_full = np.zeros(n)
    w_full[sel] = weights
    gram_w = weighted_gram(D, w_full)
    gram_u = weighted_gram(D, sel.astype(float))
    b = D.T @ (sample.y * w_full) / n
    fac = factor_gram(gram_w)
    coefs = fac.solve(b)

    k = spec_p.dim
    design_sel = D[sel]
    fitted = design_sel @ coefs
    return FpwFit(
        gamma=coefs[:k],
        control_coefs=coefs[k:],
        spec_p=spec_p,
        selection=phi,
        weights=weights,
        h_coefs=h_coefs,
        gram_unweighted=gram_u,
        gram_weighted=gram_w,
        residuals=sample.y[sel] - fitted,
        fitted=fitted,
        y_sel=sample.y[sel],
        x_sel=sample.x[sel],
        controls_sel=None if sample.controls is None else sample.controls[sel],
        design_sel=design_sel,
        n=n,
        clamp_count=clamp_count,
        used_pseudoinverse=fac.used_pseudoinverse,
    )


def predict(fit: FpwFit, x, controls=None):
    """Evaluate the fitted regression at x (plus the linear control part).

    With controls omitted on a fit that has them, only the series
    component is returned.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = design_matrix(x_arr, fit.spec_p) @ fit.gamma
    if controls is not None:
        controls = np.asarray(controls, dtype=float)
        if controls.shape[-1] != fit.control_coefs.size:
            raise ValueError("control dimension mismatch")
        out = out + controls @ fit.control_coefs
    return float(out[0]) if np.ndim(x) == 0 else out


@dataclass
class LinearFit:
    """Weighted OLS fit with heteroskedasticity-robust standard errors."""

    coefs: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    mode: str
    n_used: int


def weighted_ols(design, y, weights):
    """Weighted OLS with a sandwich covariance treating weights as known."""
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n = design.shape[0]
    bread = weighted_gram(design, weights)
    fac = factor_gram(bread)
    coefs = fac.solve(design.T @ (weights * y) / n)
    resid = y - design @ coefs
    meat = weighted_gram(design, (weights * resid) ** 2)
    bread_inv = fac.inverse()
    cov = bread_inv @ meat @ bread_inv / n
    return coefs, cov


def fit_linear(
    sample: Sample,
    mode: str,
    phi: SelectionModel | None = None,
    spec_p: BasisSpec | None = None,
) -> LinearFit:
    """Linear regression of y on (1, x, controls) under one weighting mode.

    FPW uses the estimated fractional weights (``spec_p`` sets the basis
    for hhat, defaulting to quadratic with 2 interior knots); IPW uses
    1/phi; MAR runs unweighted on the selected units; FULL runs on every
    unit and requires a fully observed covariate (simulation only).
    """
    mode = mode.upper()
    if mode not in LINEAR_MODES:
        raise ValueError(f"mode must be one of {LINEAR_MODES}")
    if mode in ("FPW", "IPW") and phi is None:
        raise ValueError(f"{mode} requires a fitted selection model")

    if mode == "FULL":
        if not np.all(np.isfinite(sample.x)):
            raise ValueError("FULL mode requires fully observed covariates")
        rows = np.ones(sample.n, dtype=bool)
        weights = np.ones(sample.n)
    else:
        rows = sample.selected
        if mode == "MAR":
            weights = np.ones(sample.n_selected)
        elif mode == "IPW":
            weights = 1.0 / phi_eval(phi, sample.y[rows], sample.x[rows])
        else:
            if spec_p is None:
                spec_p = spec_from_data(sample.x_observed, degree=2, n_interior=2)
            weights = fpw_weights(sample, phi, spec_p)

    if int(rows.sum()) < 2:
        raise ValueError("need at least 2 usable observations")
    cols = [np.ones(int(rows.sum())), sample.x[rows]]
    if sample.controls is not None:
        cols.append(sample.controls[rows])
    design = np.column_stack(cols)
    coefs, cov = weighted_ols(design, sample.y[rows], weights)
    return LinearFit(
        coefs=coefs,
        se=np.sqrt(np.diag(cov)),
        cov=cov,
        mode=mode,
        n_used=int(rows.sum()),
    )
