"""Equilibrium HJB solvers for time-inconsistent stochastic control."""

from .core import (ConfigError, DivergenceError, Field2, Field4, InstabilityError,
                   SolverError, SpaceTimeGrid, derivative, diagonal_trace, holder_norms,
                   make_grid, read_t4b, write_t4b)

__all__ = [
    "ConfigError", "DivergenceError", "Field2", "Field4", "InstabilityError", "SolverError",
    "SpaceTimeGrid", "derivative", "diagonal_trace", "holder_norms", "make_grid",
    "read_t4b", "write_t4b",
]
