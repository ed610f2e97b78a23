"""Adaptive P1 finite elements for the regularized Poisson-Boltzmann equation.

Exact-solve AFEM and the inexact variant (one nonlinear solve on the coarse
mesh, one Newton update per refined level) on tetrahedral meshes refined by
longest-edge bisection.
"""
from ._kernels import BACKEND
from .afem import AfemConfig, AfemRecord, AfemResult, Mode, afem_exact, afem_inexact
from .estimate import ErrorIndicators, MarkSet, dorfler_mark, estimate
from .fem import CoefficientField, FeFunction, ProblemSpec
from .mesh import Mesh, bisect, build_cube_mesh, check_conformity
from .problems import ExperimentId, make_problem
from .solver import SolverConfig, SolverError, SolveReport, newton_update, nsolve

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AfemConfig",
    "AfemRecord",
    "AfemResult",
    "Mode",
    "afem_exact",
    "afem_inexact",
    "ErrorIndicators",
    "MarkSet",
    "dorfler_mark",
    "estimate",
    "CoefficientField",
    "FeFunction",
    "ProblemSpec",
    "Mesh",
    "bisect",
    "build_cube_mesh",
    "check_conformity",
    "ExperimentId",
    "make_problem",
    "SolverConfig",
    "SolverError",
    "SolveReport",
    "newton_update",
    "nsolve",
]
