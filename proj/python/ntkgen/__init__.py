"""Neural tangent kernel methods for genetic risk prediction."""

from ._ntkgen import (
    FittedPredictor,
    MlpModel,
    NumericError,
    ValidationError,
    blup_predict,
    empirical_ntk,
    grm_kernel,
    krr_fit,
    lmm_krr_gap,
    minque,
    ntk_analytic,
    ntk_dynamics_predict,
    pearson,
    run_campaign,
    simulate,
    train_mlp,
    width_convergence,
)

__all__ = [
    "FittedPredictor",
    "MlpModel",
    "NumericError",
    "ValidationError",
    "blup_predict",
    "empirical_ntk",
    "grm_kernel",
    "krr_fit",
    "lmm_krr_gap",
    "minque",
    "ntk_analytic",
    "ntk_dynamics_predict",
    "pearson",
    "run_campaign",
    "simulate",
    "train_mlp",
    "width_convergence",
]
