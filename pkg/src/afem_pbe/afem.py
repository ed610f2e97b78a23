"""SOLVE -> ESTIMATE -> MARK -> REFINE loops (exact and inexact) and diagnostics."""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import fem
from .estimate import ErrorIndicators, MarkSet, dorfler_mark, estimate, write_indicators
from .fem import FeFunction, ProblemSpec
from .mesh import Mesh, bisect, write_mesh
from .solver import SolverConfig, SolverError, newton_update, nsolve

log = logging.getLogger(__name__)

DIAGNOSTICS = frozenset({"contraction", "quasi", "approx", "linf"})


class Mode(enum.Enum):
    Exact = "exact"
    Inexact = "inexact"


@dataclass(frozen=True)
class AfemConfig:
    theta: float = 0.5
    max_vertices: int = 200_000
    mode: Mode = Mode.Inexact
    diagnostics: frozenset = frozenset({"linf"})
    solver: SolverConfig = field(default_factory=SolverConfig)
    keep_solutions: bool = False
    dump_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        unknown = set(self.diagnostics) - DIAGNOSTICS
        if unknown:
            raise ValueError(f"unknown diagnostics {sorted(unknown)}")


@dataclass
class AfemRecord:
    level: int
    vertices: int
    tets: int
    marked: int = 0
    eta_total_sq: float = math.nan
    energy_error_sq: float = math.nan
    energy_error_exact_discrete_sq: float = math.nan
    exact_discrete_error_sq: float = math.nan
    update_norm_sq: float = math.nan
    max_norm: float = math.nan
    newton_iters: int = 0
    cg_iters: int = 0
    final_residual_norm: float = math.nan
    clamp_events: int = 0
    t_solve: float = 0.0
    t_assembly: float = 0.0
    t_estimate: float = 0.0
    t_mark: float = 0.0
    t_refine: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def t_nonsolver(self) -> float:
        return self.t_estimate + self.t_mark + self.t_refine + self.t_assembly


@dataclass
class AfemResult:
    records: list
    solution: FeFunction
    mesh: Mesh
    mode: Mode
    solutions: list = field(default_factory=list)
    indicators: ErrorIndicators | None = None

    @property
    def final_vertices(self) -> int:
        return self.mesh.n_vertices


def release_caches(mesh: Mesh) -> None:
    """Drop per-mesh assembly and topology caches (the mesh stays usable)."""
    for key in ("_fem_cache", "geometry", "faces", "diameters", "boundary_faces"):
        mesh.__dict__.pop(key, None)


def _prepare(mesh: Mesh, spec: ProblemSpec) -> float:
    """Build the per-mesh assembly caches; returns the time taken."""
    start = time.perf_counter()
    fem.prepare(mesh, spec)
    return time.perf_counter() - start


def _assembly_time(mesh: Mesh, spec: ProblemSpec, u: FeFunction) -> float:
    """Time of one residual+Jacobian assembly on a mesh with warm caches."""
    start = time.perf_counter()
    fem.newton_system(mesh, u, spec)
    return time.perf_counter() - start


class AdaptiveLoop:
    """Stateful SOLVE-ESTIMATE-MARK-REFINE iteration.

    ``afem_exact`` and ``afem_inexact`` drive it to a vertex budget; the
    reference-solution protocol keeps calling :meth:`advance` past it.
    """

    def __init__(self, mesh0: Mesh, spec: ProblemSpec, config: AfemConfig):
        self.spec = spec
        self.config = config
        self.records: list[AfemRecord] = []
        self.solutions: list[FeFunction] = []
        self.keep_solutions = config.keep_solutions
        self.mesh = mesh0
        t_setup = _prepare(mesh0, spec)
        start = time.perf_counter()
        self.u, report = nsolve(mesh0, spec, config.solver)
        self._record_solve(report, time.perf_counter() - start, None, t_setup)

    @property
    def level(self) -> int:
        return len(self.records) - 1

    def _record_solve(self, report, t_solve, previous, t_setup):
        mesh, u, spec, cfg = self.mesh, self.u, self.spec, self.config
        rec = AfemRecord(
            level=len(self.records),
            vertices=mesh.n_vertices,
            tets=mesh.n_tets,
            newton_iters=report.newton_iters,
            cg_iters=report.cg_iters_total,
            final_residual_norm=report.final_residual_norm,
            clamp_events=report.clamp_events,
            t_solve=t_solve,
        )
        rec.max_norm = fem.max_norm(u)
        # cache construction (pattern, stiffness, load) plus one warm assembly
        rec.t_assembly = t_setup + _assembly_time(mesh, spec, u)
        if spec.exact_gradient is not None:
            rec.energy_error_sq = fem.energy_error_sq(mesh, u, spec.exact_gradient, spec.coefficients)
        if previous is not None:
            diff = u.values - fem.prolongate(previous, mesh).values
            rec.update_norm_sq = fem.energy_norm_sq(mesh, diff, spec.coefficients)
        if "approx" in cfg.diagnostics:
            self._approx_property(rec)
        self.records.append(rec)
        if self.keep_solutions:
            self.solutions.append(u)
        if cfg.dump_dir is not None:
            write_mesh(mesh, f"{cfg.dump_dir}/mesh_{rec.level:03d}.txt")
            fem.write_fefunction(u, f"{cfg.dump_dir}/u_{rec.level:03d}.txt")

    def _approx_property(self, rec: AfemRecord) -> None:
        # diagnostic only: never feeds back into the mesh sequence
        try:
            exact, _ = nsolve(self.mesh, self.spec, self.config.solver, initial=self.u)
        except SolverError as exc:
            log.warning("approx-property solve failed at level %d: %s", rec.level, exc)
            return
        diff = exact.values - self.u.values
        rec.energy_error_exact_discrete_sq = fem.energy_norm_sq(self.mesh, diff, self.spec.coefficients)
        if self.spec.exact_gradient is not None:
            rec.exact_discrete_error_sq = fem.energy_error_sq(
                self.mesh, exact, self.spec.exact_gradient, self.spec.coefficients
            )

    def estimate(self) -> ErrorIndicators:
        start = time.perf_counter()
        ind = estimate(self.mesh, self.u, self.spec)
        rec = self.records[-1]
        rec.t_estimate = time.perf_counter() - start
        rec.eta_total_sq = ind.total_sq
        if self.config.dump_dir is not None:
            write_indicators(ind, f"{self.config.dump_dir}/eta_{rec.level:03d}.txt")
        return ind

    def advance(self, ind: ErrorIndicators, mode: Mode | None = None) -> MarkSet:
        """MARK, REFINE and SOLVE for one level; returns the mark set used."""
        mode = mode or self.config.mode
        rec = self.records[-1]
        start = time.perf_counter()
        marks = dorfler_mark(ind, self.config.theta)
        rec.t_mark = time.perf_counter() - start
        rec.marked = len(marks)
        if len(marks) == 0:
            return marks
        start = time.perf_counter()
        mesh = bisect(self.mesh, marks.ids)
        rec.t_refine = time.perf_counter() - start
        fem.inherit_moments(self.mesh, mesh)
        release_caches(self.mesh)
        t_setup = _prepare(mesh, self.spec)

        previous = self.u
        start = time.perf_counter()
        if mode is Mode.Inexact:
            u, report = newton_update(previous, mesh, self.spec, self.config.solver)
        else:
            warm = fem.prolongate(previous, mesh)
            u, report = nsolve(mesh, self.spec, self.config.solver, initial=warm)
        t_solve = time.perf_counter() - start
        self.mesh, self.u = mesh, u
        self._record_solve(report, t_solve, previous, t_setup)
        return marks

    def run(self, max_vertices: int, on_level=None) -> ErrorIndicators:
        """Iterate until the mesh exceeds ``max_vertices`` or the estimator vanishes.

        ``on_level(loop)``, if given, is called once per level after ESTIMATE.
        """
        while True:
            ind = self.estimate()
            if on_level is not None:
                on_level(self)
            rec = self.records[-1]
            log.info(
                "level %d: N=%d eta=%.4e err=%.4e newton=%d cg=%d",
                rec.level, rec.vertices, math.sqrt(ind.total_sq),
                math.sqrt(rec.energy_error_sq) if rec.energy_error_sq >= 0 else math.nan,
                rec.newton_iters, rec.cg_iters,
            )
            if self.mesh.n_vertices > max_vertices or ind.total_sq == 0.0:
                return ind
            if len(self.advance(ind)) == 0:
                return ind

    def result(self, ind=None) -> AfemResult:
        return AfemResult(
            records=self.records,
            solution=self.u,
            mesh=self.mesh,
            mode=self.config.mode,
            solutions=self.solutions,
            indicators=ind,
        )


def _run(mesh0, spec, config, mode):
    if config.mode is not mode:
        config = AfemConfig(**{**config.__dict__, "mode": mode})
    loop = AdaptiveLoop(mesh0, spec, config)
    ind = loop.run(config.max_vertices)
    return loop.result(ind)


def afem_inexact(mesh0: Mesh, spec: ProblemSpec, config: AfemConfig | None = None) -> AfemResult:
    """Full nonlinear solve on ``mesh0``, then one Newton update per level."""
    return _run(mesh0, spec, config or AfemConfig(), Mode.Inexact)


def afem_exact(mesh0: Mesh, spec: ProblemSpec, config: AfemConfig | None = None) -> AfemResult:
    """Newton to tolerance on every level, warm-started from the prolonged solution."""
    return _run(mesh0, spec, config or AfemConfig(), Mode.Exact)


# --------------------------------------------------------------------------
# diagnostics

GAMMA_GRID = np.logspace(-3, 3, 61)


@dataclass
class ContractionReport:
    alpha: np.ndarray  # per step, for the requested gamma
    gamma: float
    best_gamma: float
    best_alpha: np.ndarray
    start: int = 0

    @property
    def best_max_alpha(self) -> float:
        return float(self.best_alpha.max()) if self.best_alpha.size else math.nan


def contraction_factors(errors_sq, eta_sq, gamma: float) -> np.ndarray:
    """``alpha_k = sqrt(Q_{k+1} / Q_k)`` with ``Q_k = err_k^2 + gamma * eta_k^2``."""
    q = np.asarray(errors_sq, dtype=np.float64) + gamma * np.asarray(eta_sq, dtype=np.float64)
    return np.sqrt(q[1:] / q[:-1])


def contraction_diagnostics(records, gamma: float = 1.0, start: int = 0, grid=GAMMA_GRID) -> ContractionReport:
    """Empirical contraction factors plus the gamma minimizing ``max_k alpha_k``.

    Only steps from level ``start`` on enter the maximization.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    err = np.array([r.energy_error_sq for r in records], dtype=np.float64)
    eta = np.array([r.eta_total_sq for r in records], dtype=np.float64)
    if err.size and not np.all(np.isfinite(err)):
        raise ValueError("contraction diagnostics need exact or reference errors on every level")
    alpha = contraction_factors(err, eta, gamma)
    best_gamma, best = gamma, alpha
    best_max = np.inf
    for g in grid:
        a = contraction_factors(err, eta, g)[start:]
        if a.size and a.max() < best_max:
            best_max, best_gamma, best = a.max(), float(g), a
    return ContractionReport(alpha, gamma, best_gamma, best, start)


def quasi_orthogonality(errors_sq, update_norms_sq, floor: float = 1e-300) -> np.ndarray:
    """``Lambda_k = (|||u-u_{k+1}|||^2 + |||u_{k+1}-u_k|||^2) / |||u-u_k|||^2``.

    ``update_norms_sq[k]`` is ``|||u_k - u_{k-1}|||^2`` (NaN at level 0), as
    stored in :class:`AfemRecord`.  Steps with an underflowing denominator
    give NaN.
    """
    err = np.asarray(errors_sq, dtype=np.float64)
    upd = np.asarray(update_norms_sq, dtype=np.float64)
    denom = err[:-1]
    lam = np.full(denom.shape, np.nan)
    ok = denom > floor
    lam[ok] = (err[1:][ok] + upd[1:][ok]) / denom[ok]
    return lam


def quasi_orthogonality_check(records) -> np.ndarray:
    return quasi_orthogonality(
        [r.energy_error_sq for r in records], [r.update_norm_sq for r in records]
    )


def approx_property_report(records) -> np.ndarray:
    """``r_k = |||u_k - hat u_k|||^2 / eta^2(hat u_k)`` per level."""
    diff = np.array([r.energy_error_exact_discrete_sq for r in records], dtype=np.float64)
    eta = np.array([r.eta_total_sq for r in records], dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return diff / eta
