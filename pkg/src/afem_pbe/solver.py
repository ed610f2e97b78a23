"""Diagonally preconditioned CG, damped Newton, and the one-step Newton update."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .fem import AssemblyStats, FeFunction, ProblemSpec, SparseSystem
from .mesh import Mesh


class SolverError(RuntimeError):
    """Newton or CG failed to converge; ``report`` holds the partial record."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    cg_rel_tol: float = 1e-10
    cg_max_iter: int | None = None  # default 10 * sqrt(n) + 1000
    damping_max_halvings: int = 30

    def __post_init__(self):
        if not (self.newton_tol > 0 and self.cg_rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.newton_max_iter < 1 or self.damping_max_halvings < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.cg_max_iter is not None and self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be >= 1")

    def cg_cap(self, n: int) -> int:
        if self.cg_max_iter is not None:
            return self.cg_max_iter
        return int(10 * math.sqrt(n)) + 1000


@dataclass
class SolveReport:
    newton_iters: int = 0
    cg_iters_total: int = 0
    final_residual_norm: float = 0.0
    damping_events: int = 0
    clamp_events: int = 0
    trial_clamp_events: int = 0
    wall_time: float = 0.0
    residual_history: list = field(default_factory=list)


@dataclass
class CGInfo:
    iterations: int
    converged: bool
    residual_norm: float


def pcg_solve(A, b, config: SolverConfig | None = None, callback=None):
    """Conjugate gradients preconditioned by the inverse diagonal of ``A``.

    Returns ``(x, info)``; ``info.converged`` is False if ``cg_max_iter`` was
    reached before ``||A x - b|| <= cg_rel_tol * ||b||``.  ``callback(x)`` is
    called after every iteration.
    """
    config = config or SolverConfig()
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, CGInfo(0, True, 0.0)
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ValueError("pcg_solve needs a positive diagonal")
    dinv = 1.0 / diag
    tol = config.cg_rel_tol * bnorm
    cap = config.cg_cap(n)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    rnorm = bnorm
    k = 0
    while k < cap:
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        k += 1
        if callback is not None:
            callback(x)
        rnorm = float(np.linalg.norm(r))
        if rnorm <= tol:
            break
        z = dinv * r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, CGInfo(k, rnorm <= tol, rnorm)


def _free_norm(r: np.ndarray) -> float:
    # constrained entries of the residual are already zero
    return float(np.linalg.norm(r))


def initial_guess(mesh: Mesh, spec: ProblemSpec) -> FeFunction:
    """Zero in the interior, nodal boundary data on Dirichlet vertices."""
    u = np.zeros(mesh.n_vertices)
    idx = fem.constrained_vertices(mesh, spec)
    u[idx] = fem.boundary_values(mesh, spec, idx)
    return FeFunction(mesh, u)


def _newton_step(mesh, spec, r, J, config, report):
    idx = fem.constrained_vertices(mesh, spec)
    system = fem.apply_dirichlet(SparseSystem(J, -r), idx, 0.0)
    delta, info = pcg_solve(system.matrix, system.rhs, config)
    report.cg_iters_total += info.iterations
    if not info.converged:
        raise SolverError(
            f"CG did not converge in {info.iterations} iterations "
            f"(residual {info.residual_norm:.3e})",
            report,
        )
    return delta


def nsolve(
    mesh: Mesh,
    spec: ProblemSpec,
    config: SolverConfig | None = None,
    initial: FeFunction | None = None,
) -> tuple[FeFunction, SolveReport]:
    """Damped Newton iteration run to ``||residual|| <= newton_tol``.

    Each step halves the step length until the residual norm strictly
    decreases.
    """
    config = config or SolverConfig()
    start = time.perf_counter()
    report = SolveReport()
    if initial is None:
        u = initial_guess(mesh, spec).values
    else:
        if initial.mesh is not mesh:
            raise fem.MeshMismatchError("initial guess lives on another mesh")
        u = initial.values.copy()
        idx = fem.constrained_vertices(mesh, spec)
        u[idx] = fem.boundary_values(mesh, spec, idx)

    stats = AssemblyStats()
    r, J = fem.newton_system(mesh, u, spec, stats=stats)
    rnorm = _free_norm(r)
    report.residual_history.append(rnorm)
    while rnorm > config.newton_tol:
        if report.newton_iters >= config.newton_max_iter:
            report.final_residual_norm = rnorm
            raise SolverError(
                f"Newton did not converge in {config.newton_max_iter} iterations "
                f"(residual {rnorm:.3e})",
                report,
            )
        delta = _newton_step(mesh, spec, r, J, config, report)
        step = 1.0
        for halving in range(config.damping_max_halvings + 1):
            trial = u + step * delta
            tstats = AssemblyStats()
            r_trial = fem.assemble_residual(mesh, trial, spec, stats=tstats)
            tnorm = _free_norm(r_trial)
            report.trial_clamp_events += tstats.clamp_events
            if tnorm < rnorm:
                break
            step *= 0.5
        else:
            report.final_residual_norm = rnorm
            raise SolverError(
                f"damping exceeded {config.damping_max_halvings} halvings", report
            )
        report.damping_events += halving
        report.newton_iters += 1
        u = trial
        stats = AssemblyStats()
        r, J = fem.newton_system(mesh, u, spec, stats=stats)
        rnorm = _free_norm(r)
        report.residual_history.append(rnorm)

    report.final_residual_norm = rnorm
    report.clamp_events = stats.clamp_events
    report.wall_time = time.perf_counter() - start
    if report.clamp_events:
        raise SolverError(
            f"converged iterate still hits the sinh clamp ({report.clamp_events} points)",
            report,
        )
    return FeFunction(mesh, u), report


def newton_update(
    u_prev: FeFunction,
    mesh: Mesh,
    spec: ProblemSpec,
    config: SolverConfig | None = None,
) -> tuple[FeFunction, SolveReport]:
    """One undamped Newton step from the prolongation of ``u_prev`` to ``mesh``."""
    config = config or SolverConfig()
    start = time.perf_counter()
    report = SolveReport(newton_iters=1)
    w = fem.prolongate(u_prev, mesh).values
    idx = fem.constrained_vertices(mesh, spec)
    w[idx] = fem.boundary_values(mesh, spec, idx)
    stats = AssemblyStats()
    r, J = fem.newton_system(mesh, w, spec, stats=stats)
    report.residual_history.append(_free_norm(r))
    report.trial_clamp_events = stats.clamp_events
    delta = _newton_step(mesh, spec, r, J, config, report)
    u = w + delta
    stats = AssemblyStats()
    report.final_residual_norm = _free_norm(fem.assemble_residual(mesh, u, spec, stats=stats))
    report.residual_history.append(report.final_residual_norm)
    report.clamp_events = stats.clamp_events
    report.wall_time = time.perf_counter() - start
    return FeFunction(mesh, u), report
