"""Clamped B-spline bases and bivariate tensor products.

These span the sieve spaces used by both estimation stages: a univariate
basis of dimension K = degree + 1 + n_interior for the regression of
interest, and a tensor-product basis of dimension L = K_y * K_w for the
conditional-moment step.

Quantile knot placement uses the order statistic at index ceil(q * n)
(1-based). Evaluation outside the boundary interval clamps to it instead
of raising, so prediction grids may touch the boundary after rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "BasisSpec",
    "TensorSpec",
    "make_knots",
    "eval_basis",
    "design_matrix",
    "eval_tensor",
    "tensor_design",
    "spec_from_data",
]


@dataclass(frozen=True)
class BasisSpec:
    """B-spline basis of ``degree`` with ``n_interior`` interior knots on [a, b].

    ``knots`` is the full clamped knot vector (boundary knots repeated
    degree + 1 times); it is None until :func:`make_knots` fills it in.
    Instances are immutable and safe to share across threads.
    """

    degree: int
    n_interior: int
    placement: str = "quantile"
    boundary: tuple[float, float] = (0.0, 1.0)
    knots: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.n_interior < 0:
            raise ValueError("n_interior must be nonnegative")
        if self.placement not in ("quantile", "uniform"):
            raise ValueError(f"unknown knot placement {self.placement!r}")
        a, b = self.boundary
        if not (np.isfinite(a) and np.isfinite(b)) or a >= b:
            raise ValueError(f"degenerate boundary interval [{a}, {b}]")
        if self.knots is not None:
            kv = np.asarray(self.knots, dtype=float)
            if np.any(np.diff(kv) < 0):
                raise ValueError("knot vector must be nondecreasing")
            if len(kv) != self.dim + self.degree + 1:
                raise ValueError("knot vector length inconsistent with dimension")

    @property
    def dim(self) -> int:
        """Basis dimension K = degree + 1 + n_interior."""
        return self.degree + 1 + self.n_interior

    @property
    def knot_array(self) -> np.ndarray:
        if self.knots is None:
            raise ValueError("basis spec has no knots; call make_knots first")
        return np.asarray(self.knots, dtype=float)


@dataclass(frozen=True)
class TensorSpec:
    """Tensor product of two univariate bases, flattened first-factor-major."""

    spec_y: BasisSpec
    spec_w: BasisSpec

    @property
    def dim(self) -> int:
        return self.spec_y.dim * self.spec_w.dim


def _empirical_quantile(sorted_data: np.ndarray, q: float) -> float:
    # order statistic at ceil(q * n), 1-based
    n = sorted_data.size
    idx = int(np.ceil(q * n))
    idx = min(max(idx, 1), n)
    return float(sorted_data[idx - 1])


def make_knots(data, spec: BasisSpec) -> BasisSpec:
    """Return ``spec`` with the full clamped knot vector filled in.

    Interior knots come from the placement rule (empirical quantiles of
    ``data`` at levels j/(n_interior+1), or a uniform grid). Tied or
    out-of-range interior knots are nudged apart by the smallest
    representable spacing; if the requested count cannot fit strictly
    inside the boundary, n_interior is reduced with a warning.
    """
    a, b = spec.boundary
    m = spec.n_interior
    if m == 0:
        interior = np.empty(0)
    elif spec.placement == "uniform":
        interior = a + (b - a) * np.arange(1, m + 1) / (m + 1)
    else:
        data = np.asarray(data, dtype=float)
        data = data[np.isfinite(data)]
        if data.size == 0:
            raise ValueError("quantile knot placement requires nonempty data")
        srt = np.sort(data)
        levels = np.arange(1, m + 1) / (m + 1)
        interior = np.array([_empirical_quantile(srt, q) for q in levels])

    if m > 0:
        interior = np.clip(interior, a, b)
        # enforce strict increase inside (a, b); ties are nudged apart
        cleaned = []
        prev = a
        for t in interior:
            t = max(t, np.nextafter(prev, np.inf))
            if t < b:
                cleaned.append(t)
                prev = t
        if len(cleaned) < m:
            warnings.warn(
                f"reduced interior knots from {m} to {len(cleaned)} "
                "(ties or boundary collisions)",
                stacklevel=2,
            )
            spec = replace(spec, n_interior=len(cleaned))
        interior = np.asarray(cleaned)

    full = np.concatenate(
        [np.full(spec.degree + 1, a), interior, np.full(spec.degree + 1, b)]
    )
    return replace(spec, knots=tuple(full))


def _basis_matrix(xs: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Cox-de Boor recursion for all K basis functions at each point."""
    t = spec.knot_array
    k = spec.degree
    a, b = spec.boundary
    x = np.clip(np.asarray(xs, dtype=float).ravel(), a, b)
    n_cells = len(t) - 1

    # last cell of positive length is closed on the right so B(b) sums to 1
    pos = np.nonzero(np.diff(t) > 0)[0]
    last = pos[-1] if pos.size else -1

    B = np.zeros((x.size, n_cells))
    for i in range(n_cells):
        if t[i + 1] > t[i]:
            inside = (x >= t[i]) & (x < t[i + 1])
            if i == last:
                inside |= x == t[i + 1]
            B[inside, i] = 1.0

    for d in range(1, k + 1):
        nb = n_cells - d
        Bn = np.zeros((x.size, nb))
        for i in range(nb):
            den1 = t[i + d] - t[i]
            if den1 > 0:
                Bn[:, i] += (x - t[i]) / den1 * B[:, i]
            den2 = t[i + d + 1] - t[i + 1]
            if den2 > 0:
                Bn[:, i] += (t[i + d + 1] - x) / den2 * B[:, i + 1]
        B = Bn
    return B


def eval_basis(x: float, spec: BasisSpec) -> np.ndarray:
    """All K B-spline values at the (clamped) point ``x``."""
    return _basis_matrix(np.asarray([x]), spec)[0]


def design_matrix(xs, spec: BasisSpec) -> np.ndarray:
    """n x K matrix with row i equal to ``eval_basis(xs[i])``.

    Selection masking (zeroing rows with missing covariates) is the
    caller's responsibility.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return np.zeros((0, spec.dim))
    return _basis_matrix(xs, spec)


def eval_tensor(y: float, w: float, tspec: TensorSpec) -> np.ndarray:
    """Tensor basis at (y, w), flattened y-major (index = i_y * K_w + i_w)."""
    return np.outer(
        eval_basis(y, tspec.spec_y), eval_basis(w, tspec.spec_w)
    ).ravel()


def tensor_design(ys, ws, tspec: TensorSpec) -> np.ndarray:
    """n x L matrix of tensor-basis rows at the paired points (ys[i], ws[i])."""
    ys = np.asarray(ys, dtype=float)
    ws = np.asarray(ws, dtype=float)
    if ys.shape != ws.shape:
        raise ValueError("ys and ws must have matching shapes")
    if ys.size == 0:
        return np.zeros((0, tspec.dim))
    By = _basis_matrix(ys, tspec.spec_y)
    Bw = _basis_matrix(ws, tspec.spec_w)
    return np.einsum("ij,ik->ijk", By, Bw).reshape(ys.size, -1)


def spec_from_data(
    data,
    degree: int = 2,
    n_interior: int = 0,
    placement: str = "quantile",
    pad: float = 0.0,
) -> BasisSpec:
    """Build a basis on the observed range of ``data`` with knots filled in.

    The boundary is [min, max] of the finite entries, optionally padded by
    ``pad`` times the range on each side.
    """
    arr = np.asarray(data, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        raise ValueError("no finite data to build a basis on")
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        raise ValueError("degenerate data range for basis boundary")
    span = hi - lo
    spec = BasisSpec(
        degree=degree,
        n_interior=n_interior,
        placement=placement,
        boundary=(lo - pad * span, hi + pad * span),
    )
    return make_knots(arr, spec)
