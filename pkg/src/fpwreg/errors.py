"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """Estimation failed for numerical reasons (singularities, bad weights)."""


class RankError(NumericalError):
    """Design or Gram matrix has no usable rank."""
