"""Active label selection for maximum-likelihood estimation.

The package implements a two-stage protocol: a coarse MLE from a small
uniform sample, an optimal sampling-design solve at that estimate, and a
final MLE on labels drawn from the mixed design.  It ships the GLM model
families the protocol supports, the weighted Newton MLE solver, the
Frank-Wolfe design optimizer with its SDP verification form, a Monte-Carlo
evaluation harness, and a CLI.
"""

from .active import (
    ActiveConfig,
    ActiveResult,
    LabelOracle,
    ReplayOracle,
    SyntheticOracle,
    UnlabeledPool,
    active_set_select,
    design_problem_at,
    passive_baseline,
)
from .design import (
    Design,
    DesignProblem,
    FisherAggregate,
    InfeasibleDesignError,
    SdpForm,
    build_sdp_form,
    design_gradient,
    design_objective,
    mix_with_uniform,
    mixing_coefficient,
    solve_design,
)
from .families import (
    DimensionMismatchError,
    LabelSpaceError,
    LinearRegressionFamily,
    LogisticRegressionFamily,
    ModelFamily,
    MultinomialLogisticFamily,
    get_family,
)
from .harness import (
    DiagnosticsError,
    ExperimentReport,
    RegularityDiagnostics,
    Scenario,
    e1ej_pool,
    expected_nll_gap,
    fisher_identity_check,
    gaussian_pool,
    make_pool,
    pool_fisher,
    rate_constant,
    rate_unit_factor,
    regularity_diagnostics,
    run_scenario,
)
from .linalg import SingularMatrixError
from .mle import LabeledSet, MleResult, ParamSpace, fit_mle

__version__ = "0.1.0"

__all__ = [
    "ActiveConfig",
    "ActiveResult",
    "Design",
    "DesignProblem",
    "DiagnosticsError",
    "DimensionMismatchError",
    "ExperimentReport",
    "FisherAggregate",
    "InfeasibleDesignError",
    "LabelOracle",
    "LabelSpaceError",
    "LabeledSet",
    "LinearRegressionFamily",
    "LogisticRegressionFamily",
    "MleResult",
    "ModelFamily",
    "MultinomialLogisticFamily",
    "ParamSpace",
    "RegularityDiagnostics",
    "ReplayOracle",
    "Scenario",
    "SdpForm",
    "SingularMatrixError",
    "SyntheticOracle",
    "UnlabeledPool",
    "active_set_select",
    "build_sdp_form",
    "design_gradient",
    "design_objective",
    "design_problem_at",
    "e1ej_pool",
    "expected_nll_gap",
    "fisher_identity_check",
    "fit_mle",
    "gaussian_pool",
    "get_family",
    "make_pool",
    "mix_with_uniform",
    "mixing_coefficient",
    "passive_baseline",
    "pool_fisher",
    "rate_constant",
    "rate_unit_factor",
    "regularity_diagnostics",
    "run_scenario",
    "solve_design",
]
