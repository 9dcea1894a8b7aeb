"""Numerical laboratory for optimal control of stochastic evolution equations.

Galerkin truncation, forward simulation, regression-based BSDE and adjoint
solvers, maximum-principle and dynamic-programming diagnostics.
"""
from .adjoint import AdjointBundle, solve_adjoints, solve_bsie, verify_ito_formula
from .bsde import BSDESolution, backward_semigroup, cost_functional, solve_bsde
from .dpp import ControlLattice, ModelSetup, check_dpp, estimate_value
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DivergenceError,
    InvalidArgumentError,
    NumericalFailureError,
    SeelabError,
    UnsupportedProblemError,
)
from .experiments import ExperimentSpec, build_builtin, run_experiment
from .forward import TimeGrid, simulate_forward, simulate_linear
from .galerkin import GalerkinSpace, OperatorFamily, check_coercivity, make_laplacian_space
from .kernels import BACKEND
from .mp import hamiltonian, mp_residual
from .problem import ConstantPolicy, ControlProblem, FeedbackPolicy, PiecewiseConstantPolicy
from .regression import RegressionBasis

__version__ = "0.1.0"

__all__ = [
    "AdjointBundle", "BACKEND", "BSDESolution", "ConfigurationError", "ConstantPolicy",
    "ControlLattice", "ControlProblem", "ConvergenceError", "DivergenceError",
    "ExperimentSpec", "FeedbackPolicy", "GalerkinSpace", "InvalidArgumentError", "ModelSetup",
    "NumericalFailureError", "OperatorFamily", "PiecewiseConstantPolicy", "RegressionBasis",
    "SeelabError", "TimeGrid", "UnsupportedProblemError", "backward_semigroup",
    "build_builtin", "check_coercivity", "check_dpp", "cost_functional", "estimate_value",
    "hamiltonian", "make_laplacian_space", "mp_residual", "run_experiment", "simulate_forward",
    "simulate_linear", "solve_adjoints", "solve_bsde", "solve_bsie", "verify_ito_formula",
]
