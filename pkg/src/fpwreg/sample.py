"""Observation container for the selectively-missing-covariate setting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Sample"]


@dataclass(frozen=True)
class Sample:
    """One observation set.

    delta marks whether the covariate was observed; x holds NaN where
    delta == 0. y (outcome) and w (instrument) are always observed, and
    controls, when present, is an n x c matrix of always-observed linear
    controls.
    """

    delta: np.ndarray
    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    controls: np.ndarray | None = None

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=int)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.w, dtype=float)
        n = delta.shape[0]
        if delta.ndim != 1 or y.shape != (n,) or x.shape != (n,) or w.shape != (n,):
            raise ValueError("delta, y, x, w must be vectors of equal length")
        if not np.isin(delta, (0, 1)).all():
            raise ValueError("delta must be 0/1")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(w)):
            raise ValueError("y and w must be fully observed and finite")
        if not np.all(np.isfinite(x[delta == 1])):
            raise ValueError("x must be finite wherever delta == 1")
        controls = self.controls
        if controls is not None:
            controls = np.asarray(controls, dtype=float)
            if controls.ndim == 1:
                controls = controls[:, None]
            if controls.shape[0] != n:
                raise ValueError("controls must have one row per observation")
            if not np.all(np.isfinite(controls)):
                raise ValueError("controls must be fully observed and finite")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "controls", controls)

    @property
    def n(self) -> int:
        return self.delta.shape[0]

    @property
    def n_controls(self) -> int:
        return 0 if self.controls is None else self.controls.shape[1]

    @property
    def selected(self) -> np.ndarray:
        """Boolean mask of observations with delta == 1."""
        return self.delta == 1

    @property
    def n_selected(self) -> int:
        return int(self.delta.sum())

    @property
    def x_observed(self) -> np.ndarray:
        """Covariate values on the selected subsample."""
        return self.x[self.selected]

    @property
    def response_rate(self) -> float:
        return float(self.delta.mean())
