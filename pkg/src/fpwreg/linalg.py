"""Dense least-squares kernels shared by both estimation stages.

Every Gram matrix here carries a 1/n factor so that downstream inference
formulas can be written in (X'X/n) form without tracking sample sizes.
Dimensions are small throughout (K of order 10), so the fast path is a
Cholesky solve of the normal equations, with an eigenvalue-thresholded
pseudo-inverse as the rank-deficiency fallback. The relative rank
tolerance is fixed at 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankError

__all__ = ["GramSolve", "factor_gram", "solve_spd", "weighted_gram", "least_squares"]

RANK_RTOL = 1e-10
SYM_TOL = 1e-8


@dataclass
class GramSolve:
    """Factorized symmetric Gram matrix with solve diagnostics.

    ``condition_estimate`` is the eigenvalue ratio (>= 1, inf when
    singular); ``used_pseudoinverse`` records whether the thresholded
    eigen fallback replaced the Cholesky path.
    """

    gram: np.ndarray
    condition_estimate: float
    used_pseudoinverse: bool
    _chol: np.ndarray | None = field(default=None, repr=False)
    _evals: np.ndarray | None = field(default=None, repr=False)
    _evecs: np.ndarray | None = field(default=None, repr=False)

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self._chol is not None:
            z = np.linalg.solve(self._chol, rhs)
            return np.linalg.solve(self._chol.T, z)
        evals, evecs = self._evals, self._evecs
        inv = np.where(evals > 0, 1.0 / np.where(evals > 0, evals, 1.0), 0.0)
        return evecs @ (inv * (evecs.T @ rhs))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.gram.shape[0]))


def _check_symmetric(gram: np.ndarray) -> np.ndarray:
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError("gram matrix must be square")
    scale = max(1.0, float(np.abs(gram).max(initial=0.0)))
    if np.abs(gram - gram.T).max(initial=0.0) > SYM_TOL * scale:
        raise ValueError("gram matrix is not symmetric")
    return 0.5 * (gram + gram.T)


def factor_gram(gram, rtol: float = RANK_RTOL) -> GramSolve:
    """Factor a symmetric matrix for repeated solves.

    Positive definite (within ``rtol`` of the top eigenvalue): Cholesky.
    Otherwise: eigendecomposition with eigenvalues below rtol * max
    zeroed, which yields minimal-norm solutions.
    """
    gram = _check_symmetric(gram)
    evals = np.linalg.eigvalsh(gram)
    emax = float(evals[-1])
    emin = float(evals[0])
    if emax <= 0.0:
        raise RankError("gram matrix has no positive eigenvalue (rank zero)")
    if emin > rtol * emax:
        cond = max(1.0, emax / emin)
        return GramSolve(gram, cond, False, _chol=np.linalg.cholesky(gram))
    evals_full, evecs = np.linalg.eigh(gram)
    thresh = rtol * emax
    kept = np.where(evals_full > thresh, evals_full, 0.0)
    cond = emax / emin if emin > 0 else np.inf
    return GramSolve(gram, max(1.0, cond), True, _evals=kept, _evecs=evecs)


def solve_spd(gram, rhs) -> np.ndarray:
    """Solve ``gram @ x = rhs`` for a symmetric (ideally SPD) matrix."""
    return factor_gram(gram).solve(rhs)


def weighted_gram(design, weights) -> np.ndarray:
    """(1/n) sum_i weights[i] * row_i row_i' for an n x K design."""
    design = np.asarray(design, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if design.ndim != 2:
        raise ValueError("design must be a 2-d array")
    n = design.shape[0]
    if weights.shape != (n,):
        raise ValueError("weights must be a vector matching the design rows")
    if n == 0:
        return np.zeros((design.shape[1], design.shape[1]))
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    g = design.T @ (weights[:, None] * design) / n
    return 0.5 * (g + g.T)


def least_squares(design, response, return_diagnostics: bool = False):
    """Least-squares coefficients via the normal equations.

    Rank-deficient problems fall back to the minimal-norm solution; pass
    ``return_diagnostics=True`` to also get the :class:`GramSolve` with
    the ``used_pseudoinverse`` flag.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if design.ndim != 2:
        raise ValueError("design must be a 2-d array")
    n = design.shape[0]
    if response.shape != (n,):
        raise ValueError("response length must match design rows")
    if n == 0 or not np.any(design):
        raise RankError("design has no nonzero rows")
    gram = weighted_gram(design, np.ones(n))
    fac = factor_gram(gram)
    coefs = fac.solve(design.T @ response / n)
    if return_diagnostics:
        return coefs, fac
    return coefs
