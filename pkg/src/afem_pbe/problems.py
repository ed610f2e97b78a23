"""The three benchmark problems: corner singularity and two PBE interface cubes."""
from __future__ import annotations

import enum

import numpy as np

from .fem import CoefficientField, ProblemSpec
from .mesh import DIRICHLET, NEUMANN, Mesh, build_cube_mesh


class ExperimentId(enum.Enum):
    CornerSingularity = "corner"
    PbeCube = "pbe"
    PbeJump = "pbe-jump"

    @classmethod
    def parse(cls, value) -> "ExperimentId":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ValueError(f"unknown problem '{value}'")


CORNER_SHIFT = 1e-4

#: Weights (a, b, c) of ``a x^2 + b y^2 + c z^2`` in the singular factor.
#: ``"xxy"`` is the literal ``x^2 + y^2 + x^2`` reading.
CORNER_VARIANTS = {"xyz": (1.0, 1.0, 1.0), "xxy": (2.0, 1.0, 0.0)}


class CornerSolution:
    """``u = sin(pi x) sin(pi y) sin(pi z) * (a x^2 + b y^2 + c z^2 + 1e-4)^-1.5``."""

    def __init__(self, variant: str = "xyz", shift: float = CORNER_SHIFT):
        self.weights = np.array(CORNER_VARIANTS[variant])
        self.shift = shift

    def _parts(self, p):
        x = np.asarray(p, dtype=np.float64)
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        u1 = s[..., 0] * s[..., 1] * s[..., 2]
        g1 = np.pi * np.stack(
            [c[..., 0] * s[..., 1] * s[..., 2], s[..., 0] * c[..., 1] * s[..., 2], s[..., 0] * s[..., 1] * c[..., 2]],
            axis=-1,
        )
        rho = (self.weights * x * x).sum(axis=-1) + self.shift
        drho = 2.0 * self.weights * x
        u2 = rho**-1.5
        g2 = -1.5 * rho[..., None] ** -2.5 * drho
        return u1, g1, u2, g2, rho, drho

    def value(self, p):
        u1, _, u2, _, _, _ = self._parts(p)
        return u1 * u2

    def gradient(self, p):
        u1, g1, u2, g2, _, _ = self._parts(p)
        return u2[..., None] * g1 + u1[..., None] * g2

    def _value_laplacian(self, p):
        u1, g1, u2, g2, rho, drho = self._parts(p)
        lap1 = -3.0 * np.pi**2 * u1
        lap2 = 3.75 * rho**-3.5 * (drho * drho).sum(axis=-1) - 3.0 * rho**-2.5 * self.weights.sum()
        return u1 * u2, u2 * lap1 + 2.0 * (g1 * g2).sum(axis=-1) + u1 * lap2

    def laplacian(self, p):
        return self._value_laplacian(p)[1]

    def source(self, eps: float, kappa2: float):
        """``f = -eps Laplace(u) + kappa^2 sinh(u)`` as a vectorized callable."""

        def f(p):
            u, lap = self._value_laplacian(p)
            return -eps * lap + kappa2 * np.sinh(u)

        return f


def cube_classifier(half_width: float = 0.25):
    def classify(p):
        return np.abs(p).max(axis=-1) <= half_width

    return classify


def slab_classifier(half_width: float = 0.25):
    def classify(p):
        return np.abs(p[..., 0]) <= half_width

    return classify


PBE_COEFFICIENTS = {
    ExperimentId.PbeCube: dict(eps_m=2.0, eps_s=80.0, kappa2_m=0.0, kappa2_s=1.0),
    ExperimentId.PbeJump: dict(eps_m=10.0, eps_s=1000.0, kappa2_m=0.0, kappa2_s=1.0),
}


def make_problem(
    problem,
    *,
    kappa2: float = 1.0,
    rhs: float = 1.0,
    corner_variant: str = "xyz",
    interface: str = "cube",
    initial_n: int | None = None,
) -> tuple[ProblemSpec, Mesh]:
    """Problem data and initial mesh for one of the three experiments.

    ``kappa2`` applies to the corner problem, ``rhs`` (constant source) and
    ``interface`` (``"cube"`` or ``"slab"``) to the PBE problems.
    """
    pid = ExperimentId.parse(problem)
    if pid is ExperimentId.CornerSingularity:
        sol = CornerSolution(corner_variant)
        coeff = CoefficientField(1.0, 1.0, kappa2, kappa2)
        spec = ProblemSpec(
            coefficients=coeff,
            rhs=sol.source(1.0, kappa2),
            bc_type=DIRICHLET,
            bc_data=None,
            exact_solution=sol.value,
            exact_gradient=sol.gradient,
            name=pid.value,
        )
        mesh = build_cube_mesh([[0, 0, 0], [1, 1, 1]], initial_n or 4, None, DIRICHLET)
        return spec, mesh

    classifier = {"cube": cube_classifier, "slab": slab_classifier}[interface]()
    spec = ProblemSpec(
        coefficients=CoefficientField(**PBE_COEFFICIENTS[pid]),
        rhs=float(rhs),
        bc_type=NEUMANN,
        name=pid.value,
    )
    mesh = build_cube_mesh([[-1, -1, -1], [1, 1, 1]], initial_n or 8, classifier, NEUMANN)
    return spec, mesh
