"""Arbitrary-precision continuous Galerkin integration of the Lorenz system,
with dual stability factors and a computability error model."""

__version__ = "0.1.0"

from .errors import LorenzCGError  # noqa: E402
from .precision import BigScalar, PrecisionContext, Vector, Matrix, make_context, parse_decimal, format_decimal  # noqa: E402
from .problem import LorenzParams, ODESystem, lorenz_system, make_problem  # noqa: E402
from .galerkin import SolverConfig, integrate, march, step  # noqa: E402
from .trajectory import Trajectory, divergence_time, load, save  # noqa: E402
from .adjoint import DualConfig, solve_dual, stability_factors, growth_series, error_bounds  # noqa: E402
from .errormodel import ErrorModel, calibrate, computability, eval_model, optimal_timestep, apriori_bound  # noqa: E402

__all__ = [
    "__version__",
    "LorenzCGError",
    "BigScalar",
    "PrecisionContext",
    "Vector",
    "Matrix",
    "make_context",
    "parse_decimal",
    "format_decimal",
    "LorenzParams",
    "ODESystem",
    "lorenz_system",
    "make_problem",
    "SolverConfig",
    "integrate",
    "march",
    "step",
    "Trajectory",
    "divergence_time",
    "load",
    "save",
    "DualConfig",
    "solve_dual",
    "stability_factors",
    "growth_series",
    "error_bounds",
    "ErrorModel",
    "calibrate",
    "computability",
    "eval_model",
    "optimal_timestep",
    "apriori_bound",
]
