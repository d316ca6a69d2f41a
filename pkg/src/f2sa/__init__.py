"""Fully first-order stochastic bilevel solvers with high-order finite-difference hyper-gradients."""

from .findiff import DiffStencil, central_coefficients, empirical_order, forward_coefficients, stencil
from .hypergrad import analytic_hypergrad, assemble_phi, estimator_error_curve, fd_reference_hypergrad
from .problems import PROBLEM_NAMES, make_problem
from .solvers import SolverConfig, default_config, default_hyperparams, f2sa2_run, f2sa_p_run, oracle_gd_run

__version__ = "0.1.0"

__all__ = [
    "DiffStencil", "central_coefficients", "empirical_order", "forward_coefficients", "stencil",
    "analytic_hypergrad", "assemble_phi", "estimator_error_curve", "fd_reference_hypergrad",
    "PROBLEM_NAMES", "make_problem",
    "SolverConfig", "default_config", "default_hyperparams", "f2sa2_run", "f2sa_p_run", "oracle_gd_run",
]
