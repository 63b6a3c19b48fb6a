"""Solver-agnostic mixed-binary model and its solve paths."""
from .backends import BACKENDS, SolverConfig, linearize, solve
from .model import (
    EQ, GE, INFEASIBLE, ITERATION_LIMIT, LE, OPTIMAL, UNBOUNDED,
    Model, Solution, lp_relaxation, verify_solution, write_lp,
)

__all__ = [
    "BACKENDS", "EQ", "GE", "INFEASIBLE", "ITERATION_LIMIT", "LE", "OPTIMAL", "UNBOUNDED",
    "Model", "Solution", "SolverConfig", "linearize", "lp_relaxation", "solve",
    "verify_solution", "write_lp",
]
