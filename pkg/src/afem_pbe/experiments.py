"""Experiment runner: reference solutions, CSV/plot output and slope fitting."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .afem import AdaptiveLoop, AfemConfig, AfemRecord, Mode
from .problems import ExperimentId, make_problem

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "level", "vertices", "tets", "marked", "eta_total", "energy_error", "max_norm",
    "newton_iters", "cg_iters", "t_solve_ms", "t_estimate_ms", "t_mark_ms", "t_refine_ms",
)
REFERENCE_CAP = 10_000_000
SLOPE_MIN_VERTICES = 10_000


class BudgetExceeded(RuntimeError):
    """The reference solution would need more than the hard vertex cap."""


class InsufficientData(ValueError):
    """Fewer than four usable rows for a slope fit."""


@dataclass
class ConvergenceTable:
    mode: str
    levels: np.ndarray
    vertices: np.ndarray
    energy_error: np.ndarray
    eta_total: np.ndarray

    @classmethod
    def from_records(cls, records, mode: str) -> "ConvergenceTable":
        return cls(
            mode=mode,
            levels=np.array([r.level for r in records]),
            vertices=np.array([r.vertices for r in records]),
            energy_error=np.sqrt([r.energy_error_sq for r in records]),
            eta_total=np.sqrt([r.eta_total_sq for r in records]),
        )

    def __len__(self):
        return self.levels.shape[0]


def fit_slope(table: ConvergenceTable, min_vertices: float = SLOPE_MIN_VERTICES, levels=None) -> float:
    """Least-squares slope of ``log(error)`` against ``log(N)``.

    Rows enter when ``N > min_vertices`` (and, if given, ``level`` lies in
    the inclusive ``levels = (lo, hi)`` window) and the error is positive.
    """
    keep = (table.vertices > min_vertices) & np.isfinite(table.energy_error) & (table.energy_error > 0)
    if levels is not None:
        lo, hi = levels
        keep &= (table.levels >= lo) & (table.levels <= hi)
    if keep.sum() < 4:
        raise InsufficientData(f"slope fit needs >= 4 rows, window has {int(keep.sum())}")
    x = np.log(table.vertices[keep].astype(np.float64))
    y = np.log(table.energy_error[keep])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def try_fit_slope(table: ConvergenceTable, **kwargs) -> float | None:
    try:
        return fit_slope(table, **kwargs)
    except InsufficientData:
        return None


def _snapshot(records):
    return [dataclasses.replace(r) for r in records]


def reference_errors(loop: AdaptiveLoop, ind, multiplier: float = 10.0, cap: int = REFERENCE_CAP):
    """Energy errors of the stored level solutions against a finer exact solve.

    Continues ``loop`` in exact mode until the mesh has at least
    ``multiplier`` times the vertices of its current finest level; every
    stored solution then lives on an ancestor of the reference mesh, so its
    error is measured exactly after prolongation.  Returns
    ``(errors_sq, reference FeFunction)``.
    """
    solutions = list(loop.solutions)
    loop.keep_solutions = False
    target = int(math.ceil(multiplier * loop.mesh.n_vertices))
    if target > cap:
        raise BudgetExceeded(f"reference needs {target} vertices, cap is {cap}")
    while loop.mesh.n_vertices < target:
        if len(loop.advance(ind, Mode.Exact)) == 0:
            break
        ind = loop.estimate()
        log.info("reference: N=%d", loop.mesh.n_vertices)
    if loop.mesh.n_vertices > cap:
        raise BudgetExceeded(f"reference mesh grew to {loop.mesh.n_vertices} vertices")
    ref = loop.u
    coeff = loop.spec.coefficients
    errors = np.array(
        [fem.energy_norm_sq(ref.mesh, ref.values - fem.prolongate(u, ref.mesh).values, coeff) for u in solutions]
    )
    return errors, ref


@dataclass
class RunOutput:
    records: dict = field(default_factory=dict)  # mode name -> list of AfemRecord
    tables: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    meshes: dict = field(default_factory=dict)  # mode name -> final Mesh
    solutions: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def run_mode(
    problem,
    mode: Mode,
    config: AfemConfig,
    *,
    reference_multiplier: float = 10.0,
    keep_solutions: bool = False,
    on_level=None,
    **problem_kwargs,
):
    """One AFEM run with errors per the problem's protocol.

    Returns ``(records, loop)``; for the PBE problems the errors come from
    :func:`reference_errors` and ``loop`` afterwards sits on the reference mesh.
    ``on_level`` is forwarded to :meth:`AdaptiveLoop.run` (budget run only).
    """
    pid = ExperimentId.parse(problem)
    spec, mesh0 = make_problem(pid, **problem_kwargs)
    needs_reference = spec.exact_gradient is None
    config = dataclasses.replace(config, mode=mode, keep_solutions=keep_solutions or needs_reference)
    loop = AdaptiveLoop(mesh0, spec, config)
    ind = loop.run(config.max_vertices, on_level)
    records = _snapshot(loop.records)
    if needs_reference:
        errors, _ = reference_errors(loop, ind, reference_multiplier)
        for rec, err in zip(records, errors):
            rec.energy_error_sq = float(err)
    return records, loop


def format_row(rec: AfemRecord) -> str:
    vals = [
        rec.level, rec.vertices, rec.tets, rec.marked,
        math.sqrt(rec.eta_total_sq), math.sqrt(rec.energy_error_sq), rec.max_norm,
        rec.newton_iters, rec.cg_iters,
        1e3 * rec.t_solve, 1e3 * rec.t_estimate, 1e3 * rec.t_mark, 1e3 * rec.t_refine,
    ]
    return ",".join(str(v) if isinstance(v, (int, np.integer)) else f"{v:.17g}" for v in vals)


def write_csv(records, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            fh.write(format_row(rec) + "\n")


def read_csv(path) -> np.ndarray:
    return np.genfromtxt(path, delimiter=",", names=True)


def write_plot_data(table: ConvergenceTable, path) -> None:
    """Two columns ``N energy_error`` for gnuplot."""
    with open(path, "w") as fh:
        fh.write(f"# {table.mode}: N energy_error\n")
        for n, e in zip(table.vertices, table.energy_error):
            fh.write(f"{int(n)} {e:.17g}\n")


def write_reference_line(table: ConvergenceTable, path, order: float = -1.0 / 3.0) -> None:
    """``c N^order`` anchored at the first row of ``table``."""
    n0, e0 = float(table.vertices[0]), float(table.energy_error[0])
    with open(path, "w") as fh:
        fh.write(f"# reference line N^{order:.6g} anchored at N={int(n0)}\n")
        for n in (table.vertices[0], table.vertices[-1]):
            fh.write(f"{int(n)} {e0 * (n / n0) ** order:.17g}\n")


def run(
    problem,
    modes=("exact", "inexact"),
    *,
    theta: float = 0.5,
    max_vertices: int = 200_000,
    out_dir: str | None = None,
    diagnostics=frozenset({"linf"}),
    solver=None,
    reference_multiplier: float = 10.0,
    dump_meshes: bool = False,
    keep_solutions: bool = False,
    **problem_kwargs,
) -> RunOutput:
    """Run the requested modes sequentially and write their outputs to ``out_dir``."""
    pid = ExperimentId.parse(problem)
    out = RunOutput()
    for name in modes:
        mode = Mode(name)
        dump_dir = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            if dump_meshes:
                dump_dir = os.path.join(out_dir, f"{pid.value}_{name}_levels")
                os.makedirs(dump_dir, exist_ok=True)
        kwargs = dict(theta=theta, max_vertices=max_vertices, diagnostics=frozenset(diagnostics), dump_dir=dump_dir)
        if solver is not None:
            kwargs["solver"] = solver
        records, loop = run_mode(
            pid, mode, AfemConfig(**kwargs),
            reference_multiplier=reference_multiplier,
            keep_solutions=keep_solutions,
            **problem_kwargs,
        )
        table = ConvergenceTable.from_records(records, name)
        out.records[name] = records
        out.tables[name] = table
        out.slopes[name] = try_fit_slope(table)
        out.meshes[name] = loop.mesh if pid is ExperimentId.CornerSingularity else loop.solutions[-1].mesh
        if keep_solutions:
            out.solutions[name] = loop.solutions
        if out_dir is not None:
            stem = os.path.join(out_dir, f"{pid.value}_{name}")
            write_csv(records, stem + ".csv")
            write_plot_data(table, stem + ".dat")
            write_reference_line(table, stem + "_ref.dat")
            out.files += [stem + ".csv", stem + ".dat", stem + "_ref.dat"]
        log.info("%s %s: %d levels, slope %s", pid.value, name, len(records), out.slopes[name])
    return out
