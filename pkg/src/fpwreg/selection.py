"""First-stage estimation of the selection probability.

The selection probability phi(y, x) = P(selected | outcome y, covariate x)
is modeled as 1/(beta'q(y, x)) over a tensor-product B-spline basis, with
the sieve constraint 1 <= beta'q <= 1/floor enforced at all selected data
points plus a uniform grid over the (y, x) bounding box. The coefficient
vector minimizes the sum of squared fitted conditional moments

    mhat(y, w; phi) = series LS fit of (delta/phi(Y, X) - 1) on the
                      instrument tensor basis q(Y, W),

which is a convex quadratic in beta because delta/phi(Y_i, X_i) =
delta_i * beta'q(Y_i, X_i). The moment only pins beta down partially;
a small ridge toward the constant response-rate model breaks ties.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import TensorSpec, eval_tensor, spec_from_data, tensor_design
from .errors import NumericalError
from .linalg import factor_gram, least_squares
from .sample import Sample

__all__ = [
    "MdConfig",
    "SelectionModel",
    "conditional_mean_hat",
    "md_objective",
    "estimate_selection_probability",
    "phi_eval",
    "constant_selection_model",
]

FEAS_TOL = 1e-9


@dataclass
class MdConfig:
    """Configuration of the sieve minimum-distance stage.

    When the tensor specs are left as None they are built from the data:
    the selection basis over (full-sample y, observed x) and the
    instrument basis over (y, w), both with ``degree`` and ``n_interior``
    per dimension. Controls, when present in the sample, are appended to
    the instrument regression as linear columns.

    ``ridge`` is the tie-break strength at the reference sample size
    ``ridge_ref_n``; the effective penalty decays as ridge_ref_n / n so
    the uniqueness device vanishes asymptotically and does not
    contaminate convergence rates.
    """

    instrument_tspec: TensorSpec | None = None
    selection_tspec: TensorSpec | None = None
    optimizer: str = "projected-gradient"
    max_iter: int = 2000
    tol: float = 1e-10
    floor: float = 0.01
    ridge: float = 6e-4
    ridge_ref_n: int = 1000
    degree: int = 2
    n_interior: int = 0
    grid_size: int = 20

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.floor <= 0.5:
            raise ValueError("floor must lie in (0, 0.5]")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.optimizer not in ("projected-gradient", "nelder-mead"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SelectionModel:
    """Fitted selection probability phi = 1/(beta'q) with constraint metadata."""

    beta: np.ndarray
    tspec: TensorSpec
    floor: float
    objective_value: float
    constraint_grid: np.ndarray
    converged: bool = True
    n_iter: int = 0

    def denominator(self, y, x):
        """beta'q(y, x); arrays broadcast elementwise."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        scalar = y.ndim == 0 and x.ndim == 0
        y, x = np.broadcast_arrays(np.atleast_1d(y), np.atleast_1d(x))
        den = tensor_design(y.ravel(), x.ravel(), self.tspec) @ self.beta
        den = den.reshape(y.shape)
        return float(den[0]) if scalar else den


def phi_eval(model: SelectionModel, y, x):
    """Selection probability 1/(beta'q(y, x)), clamped to [floor, 1]."""
    den = model.denominator(y, x)
    den = np.clip(den, 1.0, 1.0 / model.floor)
    out = 1.0 / den
    return float(out) if np.ndim(out) == 0 else out


def _build_tspecs(sample: Sample, cfg: MdConfig) -> tuple[TensorSpec, TensorSpec]:
    sel = cfg.selection_tspec
    if sel is None:
        sel = TensorSpec(
            spec_from_data(sample.y, cfg.degree, cfg.n_interior),
            spec_from_data(sample.x_observed, cfg.degree, cfg.n_interior),
        )
    inst = cfg.instrument_tspec
    if inst is None:
        inst = TensorSpec(
            spec_from_data(sample.y, cfg.degree, cfg.n_interior),
            spec_from_data(sample.w, cfg.degree, cfg.n_interior),
        )
    return sel, inst


def _constraint_points(sample: Sample, grid_size: int) -> np.ndarray:
    """Selected data points plus a uniform grid over the (y, x) bounding box."""
    ys = sample.y[sample.selected]
    xs = sample.x_observed
    gy = np.linspace(sample.y.min(), sample.y.max(), grid_size)
    gx = np.linspace(xs.min(), xs.max(), grid_size)
    mesh = np.stack(np.meshgrid(gy, gx, indexing="ij"), axis=-1).reshape(-1, 2)
    return np.concatenate([np.column_stack([ys, xs]), mesh], axis=0)


def _instrument_design(sample: Sample, tspec: TensorSpec) -> np.ndarray:
    q = tensor_design(sample.y, sample.w, tspec)
    if sample.controls is not None:
        q = np.hstack([q, sample.controls])
    return q


class _MdProblem:
    """Precomputed quadratic form of the minimum-distance objective."""

    def __init__(self, sample: Sample, cfg: MdConfig):
        if sample.n_selected == 0:
            raise ValueError("no selected observations")
        self.sample = sample
        self.cfg = cfg
        self.tspec_sel, self.tspec_inst = _build_tspecs(sample, cfg)

        n = sample.n
        sel = sample.selected
        A = np.zeros((n, self.tspec_sel.dim))
        A[sel] = tensor_design(sample.y[sel], sample.x[sel], self.tspec_sel)
        Q = _instrument_design(sample, self.tspec_inst)

        gq = factor_gram(Q.T @ Q / n)
        S = gq.solve(Q.T @ A / n)
        s0 = gq.solve(Q.T @ np.ones(n) / n)
        Gq = Q.T @ Q / n
        self.M2 = S.T @ Gq @ S
        self.b2 = S.T @ Gq @ s0
        self.c2 = float(s0 @ Gq @ s0)

        pts = _constraint_points(sample, cfg.grid_size)
        self.constraint_points = pts
        self.C = tensor_design(pts[:, 0], pts[:, 1], self.tspec_sel)
        self.lo = 1.0
        self.hi = 1.0 / cfg.floor

        rate = sample.response_rate
        # beta'q is constant on partition-of-unity bases, so the constant
        # model 1/rate is exactly representable and feasible
        self.beta_ref = np.full(self.tspec_sel.dim, 1.0 / rate)
        self.anchor = np.full(self.tspec_sel.dim, 0.5 * (self.lo + self.hi))
        self.ridge = cfg.ridge * (cfg.ridge_ref_n / n) ** 1.5
        lam = np.linalg.eigvalsh(self.M2)[-1]
        self.lipschitz = 2.0 * (max(lam, 0.0) + self.ridge)

    def data_objective(self, beta: np.ndarray) -> float:
        return float(beta @ self.M2 @ beta - 2.0 * self.b2 @ beta + self.c2)

    def objective(self, beta: np.ndarray) -> float:
        d = beta - self.beta_ref
        return max(0.0, self.data_objective(beta)) + self.ridge * float(d @ d)

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        return 2.0 * (self.M2 @ beta - self.b2) + 2.0 * self.ridge * (
            beta - self.beta_ref
        )

    def violation(self, beta: np.ndarray) -> float:
        cv = self.C @ beta
        return float(
            max(np.max(self.lo - cv, initial=0.0), np.max(cv - self.hi, initial=0.0))
        )

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto {beta : lo <= C beta <= hi}.

        Active-set least squares: accumulate violated rows, re-project onto
        their bound hyperplanes, repeat. Falls back to retreating toward a
        strictly interior point if the iteration does not clear.
        """
        x = v
        active: dict[int, float] = {}
        for _ in range(60):
            cv = self.C @ x
            bad_lo = np.nonzero(cv < self.lo - 1e-12)[0]
            bad_hi = np.nonzero(cv > self.hi + 1e-12)[0]
            if bad_lo.size == 0 and bad_hi.size == 0:
                return x
            for i in bad_lo:
                active[int(i)] = self.lo
            for i in bad_hi:
                active[int(i)] = self.hi
            rows = np.fromiter(active.keys(), dtype=int)
            tgt = np.fromiter(active.values(), dtype=float)
            Ca = self.C[rows]
            lam = np.linalg.lstsq(Ca @ Ca.T, tgt - Ca @ v, rcond=None)[0]
            x = v + Ca.T @ lam
        return self._retreat(x)

    def _retreat(self, x: np.ndarray) -> np.ndarray:
        cv_x = self.C @ x
        cv_a = self.C @ self.anchor
        d = cv_a - cv_x
        with np.errstate(divide="ignore", invalid="ignore"):
            s_lo = np.where(cv_x < self.lo, (self.lo - cv_x) / d, 0.0)
            s_hi = np.where(cv_x > self.hi, (self.hi - cv_x) / d, 0.0)
        s = np.concatenate([s_lo, s_hi])
        s = float(np.max(np.nan_to_num(s, nan=1.0), initial=0.0))
        s = min(1.0, s * (1 + 1e-10) + 1e-12)
        return (1.0 - s) * x + s * self.anchor


def _projected_gradient(prob: _MdProblem, cfg: MdConfig):
    """Primal active-set descent for the constrained quadratic.

    Each iteration takes the Newton step of the objective restricted to
    the null space of the active constraint rows (computed by SVD with a
    thresholded solve, so directions the moment does not identify stay
    at the ridge reference), capped by a ratio test over the inactive
    rows. Constraints whose least-squares multiplier is negative are
    released; the method stops at a verified KKT point.
    """
    C, lo, hi = prob.C, prob.lo, prob.hi
    dim = prob.beta_ref.size
    atol = 1e-9 * max(1.0, hi)
    hess = 2.0 * (prob.M2 + prob.ridge * np.eye(dim))
    beta = prob.beta_ref.copy()
    obj = prob.objective(beta)
    stall = 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        g = prob.gradient(beta)
        gnorm = max(1.0, float(np.linalg.norm(g)))
        cv = C @ beta
        normals = []
        if np.any(cv <= lo + atol):
            normals.append(-C[cv <= lo + atol])
        if np.any(cv >= hi - atol):
            normals.append(C[cv >= hi - atol])
        N = np.vstack(normals) if normals else np.zeros((0, dim))

        d = np.zeros(dim)
        for _ in range(N.shape[0] + 1):
            d = _null_space_newton(hess, g, N)
            if np.linalg.norm(d) > 1e-11 * gnorm:
                break
            if N.shape[0] == 0:
                return beta, obj, True, it  # unconstrained stationary point
            mu = np.linalg.lstsq(N.T, -g, rcond=None)[0]
            worst = int(np.argmin(mu))
            if mu[worst] >= -1e-9 * gnorm:
                return beta, obj, True, it  # KKT point
            N = np.delete(N, worst, axis=0)
        if np.linalg.norm(d) <= 1e-11 * gnorm:
            return beta, obj, True, it

        s = C @ d
        slack_hi = hi - cv
        slack_lo = cv - lo
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where((s > 1e-14) & (slack_hi > atol), slack_hi / s, np.inf)
            dn = np.where((s < -1e-14) & (slack_lo > atol), -slack_lo / s, np.inf)
        t_max = float(min(up.min(initial=np.inf), dn.min(initial=np.inf)))
        t = min(1.0, t_max)
        if t <= 0:
            stall += 1
            if stall >= 3:
                return beta, obj, True, it
            continue
        cand = beta + t * d
        if prob.violation(cand) > FEAS_TOL:
            cand = prob.project(cand)
        f_cand = prob.objective(cand)
        if f_cand >= obj - cfg.tol * max(1.0, obj):
            stall += 1
        else:
            stall = 0
        if f_cand < obj:
            beta, obj = cand, f_cand
        if stall >= 3:
            return beta, obj, True, it
    return beta, obj, False, it


def _null_space_newton(hess: np.ndarray, g: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Newton direction restricted to {d : N d = 0}, rank-thresholded."""
    dim = g.size
    if N.shape[0] == 0:
        Z = np.eye(dim)
    else:
        _, sv, vt = np.linalg.svd(N, full_matrices=True)
        rank = int(np.sum(sv > 1e-12 * max(1.0, sv[0] if sv.size else 1.0)))
        if rank >= dim:
            return np.zeros(dim)
        Z = vt[rank:].T
    hz = Z.T @ hess @ Z
    rhs = -Z.T @ g
    evals, evecs = np.linalg.eigh(0.5 * (hz + hz.T))
    emax = float(evals[-1])
    if emax <= 0:
        return np.zeros(dim)
    inv = np.where(evals > 1e-12 * emax, 1.0 / np.where(evals > 0, evals, 1.0), 0.0)
    return Z @ (evecs @ (inv * (evecs.T @ rhs)))


def _nelder_mead(prob: _MdProblem, cfg: MdConfig):
    from scipy.optimize import minimize

    dim = prob.beta_ref.size
    if dim > 16:
        raise ValueError("nelder-mead fallback is limited to dimension <= 16")
    scale = max(1.0, prob.objective(prob.beta_ref))

    def penalized(beta):
        cv = prob.C @ beta
        pen = np.square(np.maximum(prob.lo - cv, 0.0)).sum()
        pen += np.square(np.maximum(cv - prob.hi, 0.0)).sum()
        return prob.objective(beta) + 1e6 * scale * pen

    res = minimize(
        penalized,
        prob.beta_ref,
        method="Nelder-Mead",
        options={"maxiter": cfg.max_iter * dim, "xatol": 1e-8, "fatol": cfg.tol},
    )
    beta = prob.project(res.x)
    obj = prob.objective(beta)
    ref_obj = prob.objective(prob.project(prob.beta_ref.copy()))
    if obj > ref_obj:
        beta, obj = prob.beta_ref.copy(), ref_obj
    return beta, obj, bool(res.success), int(res.nit)


def estimate_selection_probability(sample: Sample, cfg: MdConfig) -> SelectionModel:
    """Fit the constrained sieve minimum-distance selection model.

    Starts from the constant response-rate model and descends the
    quadratic objective under the sieve constraints. On hitting max_iter
    without stalling, the best feasible iterate is returned with
    ``converged=False`` and a warning.
    """
    prob = _MdProblem(sample, cfg)
    if cfg.optimizer == "nelder-mead":
        beta, obj, converged, it = _nelder_mead(prob, cfg)
    else:
        beta, obj, converged, it = _projected_gradient(prob, cfg)
    if prob.violation(beta) > FEAS_TOL:
        beta = prob.project(beta)
    if not converged:
        warnings.warn(
            f"selection optimizer did not converge in {it} iterations; "
            "returning best feasible iterate",
            stacklevel=2,
        )
    return SelectionModel(
        beta=beta,
        tspec=prob.tspec_sel,
        floor=cfg.floor,
        objective_value=obj,
        constraint_grid=prob.constraint_points,
        converged=converged,
        n_iter=it,
    )


def md_objective(beta, sample: Sample, cfg: MdConfig) -> float:
    """Minimum-distance objective (1/n) sum mhat^2 + ridge ||beta - beta_ref||^2."""
    beta = np.asarray(beta, dtype=float)
    prob = _MdProblem(sample, cfg)
    if prob.violation(beta) > FEAS_TOL:
        raise ValueError("beta violates the sieve constraints")
    return prob.objective(beta)


def conditional_mean_hat(sample: Sample, phi: SelectionModel, cfg: MdConfig) -> np.ndarray:
    """Fitted conditional moments mhat(Y_i, W_i; phi) at every observation.

    The regression target is delta_i/phi(Y_i, X_i) - 1, which is exactly
    -1 for unselected units, fitted on the instrument tensor basis by
    series least squares over all n observations.
    """
    sel = sample.selected
    if np.any(sel):
        den = phi.denominator(sample.y[sel], sample.x[sel])
        if np.max(den, initial=0.0) > (1.0 / phi.floor) * (1 + 1e-6):
            raise NumericalError(
                "selection probability below its floor at an observed point"
            )
    target = np.full(sample.n, -1.0)
    if np.any(sel):
        target[sel] = 1.0 / phi_eval(phi, sample.y[sel], sample.x[sel]) - 1.0
    _, tspec_inst = _build_tspecs(sample, cfg)
    Q = _instrument_design(sample, tspec_inst)
    theta = least_squares(Q, target)
    return Q @ theta


def constant_selection_model(
    sample: Sample, prob: float, floor: float = 0.01, degree: int = 2
) -> SelectionModel:
    """Selection model with phi identically equal to ``prob``.

    The constant is exactly representable because the tensor basis sums
    to one. Mainly useful for reductions and tests.
    """
    if not floor <= prob <= 1.0:
        raise ValueError("constant probability must lie in [floor, 1]")
    tspec = TensorSpec(
        spec_from_data(sample.y, degree, 0),
        spec_from_data(sample.x_observed, degree, 0),
    )
    pts = _constraint_points(sample, 2)
    return SelectionModel(
        beta=np.full(tspec.dim, 1.0 / prob),
        tspec=tspec,
        floor=floor,
        objective_value=np.nan,
        constraint_grid=pts,
    )
