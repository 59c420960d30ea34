"""Series regression with selectively missing covariates.

Two-stage estimation: a constrained sieve minimum-distance fit of the
selection probability from an instrumental conditional moment, followed
by a fractional-probability-weighted series regression, with pointwise
and multiplier-bootstrap uniform inference and a Monte Carlo harness.
"""

from .basis import (
    BasisSpec,
    TensorSpec,
    design_matrix,
    eval_basis,
    eval_tensor,
    make_knots,
    spec_from_data,
    tensor_design,
)
from .errors import NumericalError, RankError
from .estimator import (
    FpwFit,
    LinearFit,
    fit_fpw_series,
    fit_linear,
    fpw_weights,
    h_hat,
    predict,
    weighted_ols,
)
from .inference import (
    UniformBand,
    default_band_grid,
    multiplier_draw,
    pointwise_ci,
    sieve_variance,
    uniform_band,
)
from .linalg import GramSolve, least_squares, solve_spd, weighted_gram
from .sample import Sample
from .selection import (
    MdConfig,
    SelectionModel,
    conditional_mean_hat,
    constant_selection_model,
    estimate_selection_probability,
    md_objective,
    phi_eval,
)
from .simulate import (
    DgpConfig,
    RateResult,
    SimulatedData,
    StudyResult,
    rate_experiment,
    run_linear_study,
    run_nonlinear_study,
    simulate_dgp,
    true_g,
)

__version__ = "0.1.0"
