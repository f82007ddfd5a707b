"""Heterogeneity-adaptive synthesis of linear-model estimates across studies.

The package works from per-study summary statistics (coefficient estimates,
projected Gram matrices, residual variances). Each study estimate is pulled
toward a precision-weighted centroid by a study-specific weight; the weights
are chosen from the data by minimizing an estimate of the aggregate
mean-squared error that corrects for the optimism of plugging in the observed
effects. Companion tools provide closed-form risk terms, Wald-type intervals,
competitor estimators, and a Monte-Carlo harness.
"""

from .estimators import (
    HamFit,
    MixingStructure,
    RidgeFit,
    centroid,
    fixed_effect,
    ham_beta,
    mixing_matrix,
    mle_stack,
    objective_value,
    ridge_apply,
    ridge_fit,
    stack_k,
)
from .inference import (
    IntervalRow,
    IntervalTable,
    centroid_covariance,
    confidence_intervals,
    gradient_expectation,
    ham_covariance,
    i_squared,
    wald_tests,
    z_quantile,
)
from .model import (
    InputError,
    MetaProblem,
    RayScale,
    ShrinkageVector,
    StandardizationRecord,
    StudySummary,
    load_meta_problem,
    precision_from_covariance,
    save_meta_problem,
    standardize,
    summarize_raw_study,
    unstandardize,
)
from .risk import (
    RiskTerms,
    bmse,
    c_star,
    decompose,
    mse_in_c,
    pi_star_equal,
    pseudo_mse,
    risk_terms,
    true_mse,
    umse,
)
from .selection import (
    LambdaResult,
    SelectionOptions,
    SelectionResult,
    fit_ham,
    select_lambda_ridge,
    select_pi_ham,
)
from .sim import CellSpec, SimConfig, SimReport, make_example_corpus, run_cells

__version__ = "0.1.0"

__all__ = [
    "CellSpec",
    "HamFit",
    "InputError",
    "IntervalRow",
    "IntervalTable",
    "LambdaResult",
    "MetaProblem",
    "MixingStructure",
    "RayScale",
    "RidgeFit",
    "RiskTerms",
    "SelectionOptions",
    "SelectionResult",
    "ShrinkageVector",
    "SimConfig",
    "SimReport",
    "StandardizationRecord",
    "StudySummary",
    "bmse",
    "c_star",
    "centroid",
    "centroid_covariance",
    "confidence_intervals",
    "decompose",
    "fit_ham",
    "fixed_effect",
    "gradient_expectation",
    "ham_beta",
    "ham_covariance",
    "i_squared",
    "load_meta_problem",
    "make_example_corpus",
    "mixing_matrix",
    "mle_stack",
    "mse_in_c",
    "objective_value",
    "pi_star_equal",
    "precision_from_covariance",
    "pseudo_mse",
    "ridge_apply",
    "ridge_fit",
    "risk_terms",
    "run_cells",
    "save_meta_problem",
    "select_lambda_ridge",
    "select_pi_ham",
    "stack_k",
    "standardize",
    "summarize_raw_study",
    "true_mse",
    "umse",
    "unstandardize",
    "wald_tests",
    "z_quantile",
]
