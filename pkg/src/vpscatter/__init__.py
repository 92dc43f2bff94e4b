"""Modified scattering for the Vlasov–Poisson system: polyhomogeneous
approximate solutions and a backward particle solve of the finite problem."""

from .approx import ApproxSolution
from .diagnostics import DecaySeries, RateFit, fit_rate
from .expansion import CoefficientTable, build_table, read_table, write_table
from .fields import Field3, Field3Vec, Grid3
from .poisson import solve_free_space
from .profile import ScatteringProfile, default_profile, gaussian_bump_profile

__all__ = [
    "ApproxSolution", "CoefficientTable", "DecaySeries", "Field3", "Field3Vec", "Grid3",
    "RateFit", "ScatteringProfile", "build_table", "default_profile", "fit_rate",
    "gaussian_bump_profile", "read_table", "solve_free_space", "write_table",
]
__version__ = "0.1.0"
