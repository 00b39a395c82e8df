"""Variance-reduced stochastic methods for finite-sum composition optimization."""
from .core import (
    CompositionProblem,
    ContractViolation,
    DiscardLedger,
    NoUniqueMinimizer,
    ProblemConstants,
    QueryLedger,
    full_gradient,
    full_inner,
    full_jacobian,
    objective,
)
from .optimizers import (
    Algorithm,
    DivergenceError,
    RunConfig,
    Schedule,
    Trace,
    corollary1_params,
    corollary2_params,
    run,
)
from .problems import (
    closed_form_solution,
    gen_rewards,
    make_mean_variance,
    make_quadcomp,
    make_toy_nonlinear,
    read_instance,
    write_instance,
)

__all__ = [
    "CompositionProblem",
    "ContractViolation",
    "DiscardLedger",
    "NoUniqueMinimizer",
    "ProblemConstants",
    "QueryLedger",
    "full_gradient",
    "full_inner",
    "full_jacobian",
    "objective",
    "Algorithm",
    "DivergenceError",
    "RunConfig",
    "Schedule",
    "Trace",
    "corollary1_params",
    "corollary2_params",
    "run",
    "closed_form_solution",
    "gen_rewards",
    "make_mean_variance",
    "make_quadcomp",
    "make_toy_nonlinear",
    "read_instance",
    "write_instance",
]

__version__ = "0.1.0"
