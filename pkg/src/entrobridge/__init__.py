"""Entropic optimal transport and Schrödinger bridges on finite spaces."""

from .core import (
    Atom,
    CostTensor,
    CostTooLargeError,
    Coupling,
    DiscreteMeasure,
    DuplicateAtomError,
    EntroBridgeError,
    Gauge,
    InvalidConfigError,
    InvalidEpsilonError,
    MarginalIndexError,
    NonFiniteCostError,
    NonPositiveWeightError,
    NumericalInconsistencyError,
    Potential,
    Problem,
    ShapeMismatchError,
    SolverConfig,
    SupportError,
    build_problem,
    gibbs_log_kernel,
)
from .dual import (
    OptimalityReport,
    ReferenceReduction,
    WeakDualityViolation,
    check_complementarity,
    coupling_from_potentials,
    dual_value,
    dual_value_mm,
    kl_decomposition,
    kl_divergence,
    primal_value,
    reference_reduction,
    schrodinger_residual,
)
from .sinkhorn import (
    IterationRecord,
    ReferenceSolve,
    SolveReport,
    marginal_residuals,
    sinkhorn_2m,
    sinkhorn_mm,
    sinkhorn_reference,
    solve,
)
from .transform import (
    MissingPotentialError,
    c_transform,
    conjugate_with_reference,
    lambda_u,
    log_sum_exp_weighted,
    mm_transform,
    project_gauge,
    recenter_pair,
)

__version__ = "0.1.0"
