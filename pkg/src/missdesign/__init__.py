"""Minimax robust regression designs when responses go missing at random."""

from .model import (
    Design,
    DesignSpace,
    ExactDesign,
    LinearBasis,
    MissingnessModel,
    MissingPattern,
    NonlinearModel,
    RobustnessParams,
    design_matrix,
    exponential_model,
    grid_space,
    jacobian_check,
    polynomial_basis,
    quadratic2_basis,
    retention_probability,
)
from .numerics import (
    Prior,
    QuadratureRule,
    SingularInformation,
    SymTopEig,
    orthonormal_complement,
    quadrature_rule,
    spd_solve,
    sym_top_eig,
)
from .criterion import (
    VARIANT_DERIVATION,
    VARIANT_PAPER,
    BayesNodes,
    ExpectedMmpe,
    HatMatrices,
    LossReport,
    WorstCase,
    bayesian_loss,
    bayesian_report,
    expected_mmpe_max,
    hat,
    mmpe_max_given_pattern,
    nonlinear_taylor_loss,
    prepare_bayes_nodes,
    taylor_loss,
    worst_case_contamination,
)
from .apportion import efficient_apportionment
from .optimizer import PsoConfig, SolveResult, minimize_over_simplex
from .simulate import DecompositionReport, simulate_mmpe, taylor_vs_exact_report

__version__ = "0.1.0"
