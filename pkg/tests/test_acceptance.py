"""Acceptance suite: one test per criterion at its stated tolerance.

Each test stores a verdict line that the terminal summary prints as
``criterion k: PASS|FAIL  detail``.  The long runs (corner problem in both
modes to 2e5 vertices, PBE runs with reference solutions) are shared through
module-scoped fixtures; the whole module takes roughly ten minutes on one core.
Deselect it with ``-m "not slow"``.
"""
import gc

import numpy as np
import pytest

from afem_pbe import fem
from afem_pbe.afem import (
    AdaptiveLoop,
    AfemConfig,
    Mode,
    afem_exact,
    contraction_diagnostics,
    quasi_orthogonality_check,
)
from afem_pbe.estimate import ErrorIndicators, dorfler_mark, estimate, sorted_greedy_count
from afem_pbe.experiments import ConvergenceTable, fit_slope, run_mode
from afem_pbe.fem import CoefficientField, ProblemSpec
from afem_pbe.mesh import DIRICHLET, NEUMANN, build_cube_mesh
from afem_pbe.problems import cube_classifier, make_problem
from afem_pbe.solver import nsolve

pytestmark = pytest.mark.slow

CORNER_N = 200_000
PBE_N = 20_000
LINEAR_N = 20_000
MODES = ("exact", "inexact")

SLOPE_BAND = (-0.433, -0.233)
AGREEMENT_RTOL = 0.05
MATCH_MIN_N = 1e4
ORACLE_RTOL = 1e-12
ORACLE_C = 0.01
LAMBDA_MAX = 1.2
LINEAR_LAMBDA_TOL = 1e-6
LINF_SPREAD = 0.10
FD_SLOPE_RTOL = 0.05
TIMING_RATIO = 3.0
TIMING_MIN_TETS = 10_000
NEAR_ORIGIN = 0.25


def record(verdicts, k, passed, detail):
    verdicts[k] = (bool(passed), detail)
    print(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, f"criterion {k}: {detail}"


# ------------------------------------------------------------------ shared runs


@pytest.fixture(scope="module")
def corner():
    """Both modes to ``CORNER_N`` vertices; per level, the share of tets near the origin."""
    out = {}
    for name in MODES:
        near = []

        def track(loop):
            near.append(float((np.linalg.norm(loop.mesh.barycenters, axis=1) < NEAR_ORIGIN).mean()))

        records, loop = run_mode("corner", Mode(name), AfemConfig(max_vertices=CORNER_N), on_level=track)
        out[name] = (records, np.array(near))
        del loop
        gc.collect()
    return out


@pytest.fixture(scope="module")
def pbe_cube():
    """Both modes to ``PBE_N`` with errors against the 10x reference; interface shares per level."""
    out = {}
    for name in MODES:
        share = []
        records, loop = run_mode(
            "pbe", Mode(name), AfemConfig(max_vertices=PBE_N),
            on_level=lambda lp: share.append(float(lp.mesh.interface_tets().mean())),
        )
        out[name] = (records, np.array(share))
        del loop
        gc.collect()
    return out


@pytest.fixture(scope="module")
def pbe_jump():
    """Inexact run to ``PBE_N`` (no reference: only the iterates and meshes are inspected)."""
    spec, mesh = make_problem("pbe-jump")
    loop = AdaptiveLoop(mesh, spec, AfemConfig(max_vertices=PBE_N, mode=Mode.Inexact))
    share = []
    loop.run(PBE_N, on_level=lambda lp: share.append(float(lp.mesh.interface_tets().mean())))
    records = list(loop.records)
    del loop
    gc.collect()
    return records, np.array(share)


# ------------------------------------------------------------------ criteria


def test_criterion_1_corner_convergence_rate(corner, verdicts):
    slopes = {m: fit_slope(ConvergenceTable.from_records(corner[m][0], m)) for m in MODES}
    ok = all(SLOPE_BAND[0] <= s <= SLOPE_BAND[1] for s in slopes.values())
    finest = {m: corner[m][0][-1].vertices for m in MODES}
    record(verdicts, 1, ok, f"slopes exact={slopes['exact']:.4f} inexact={slopes['inexact']:.4f} "
           f"in {list(SLOPE_BAND)} (finest N {finest['exact']}/{finest['inexact']})")


def max_relative_gap(runs):
    exact, inexact = runs["exact"][0], runs["inexact"][0]
    gaps = []
    for a, b in zip(exact, inexact):
        if a.vertices > MATCH_MIN_N:
            ea, eb = np.sqrt(a.energy_error_sq), np.sqrt(b.energy_error_sq)
            gaps.append(abs(ea - eb) / ea)
    return max(gaps) if gaps else np.nan, len(gaps)


def test_criterion_2_exact_inexact_agreement(corner, pbe_cube, verdicts):
    gap_c, n_c = max_relative_gap(corner)
    gap_p, n_p = max_relative_gap(pbe_cube)
    ok = n_c > 0 and n_p > 0 and gap_c <= AGREEMENT_RTOL and gap_p <= AGREEMENT_RTOL
    record(verdicts, 2, ok, f"max relative gap corner={gap_c:.2e} ({n_c} levels) "
           f"pbe={gap_p:.2e} ({n_p} levels) <= {AGREEMENT_RTOL}")


def constant_oracle(c, kappa2=1.0):
    spec = ProblemSpec(
        CoefficientField(1.0, 1.0, kappa2, kappa2), rhs=kappa2 * np.sinh(c), bc_type=DIRICHLET,
        bc_data=lambda p: np.full(p.shape[:-1], c),
    )
    mesh = build_cube_mesh([[0, 0, 0], [1, 1, 1]], 4)
    u, report = nsolve(mesh, spec)
    eta = np.sqrt(estimate(mesh, u, spec).total_sq)
    scale = np.sqrt(estimate(mesh, np.zeros(mesh.n_vertices), spec).total_sq)
    return eta / scale, report.newton_iters


def test_criterion_3_constant_solution_oracle(verdicts):
    # scale = eta of the zero function; with the default Newton tolerance the second
    # iterate keeps a quadratic tail that grows with c, so larger c are reported too
    ratio, iters = constant_oracle(ORACLE_C)
    others = ", ".join("c=%g: %.1e/%d it" % ((c,) + constant_oracle(c)) for c in (0.1, 0.5))
    ok = ratio <= ORACLE_RTOL and iters <= 2
    record(verdicts, 3, ok, f"c={ORACLE_C}: eta/scale={ratio:.1e}, newton iterations={iters} "
           f"(<= {ORACLE_RTOL}, <= 2); also {others}")


def test_criterion_4_contraction(corner, verdicts):
    reps = {m: contraction_diagnostics(corner[m][0], start=2) for m in MODES}
    ok = all(r.best_max_alpha < 1.0 for r in reps.values())
    detail = " ".join(f"{m}: max alpha={r.best_max_alpha:.4f} at gamma={r.best_gamma:g}" for m, r in reps.items())
    record(verdicts, 4, ok, detail)


def test_criterion_5_quasi_orthogonality(corner, verdicts):
    lam = {m: np.nanmax(quasi_orthogonality_check(corner[m][0])[2:]) for m in MODES}
    spec, mesh = make_problem("corner", kappa2=0.0)
    linear = quasi_orthogonality_check(afem_exact(mesh, spec, AfemConfig(max_vertices=LINEAR_N)).records)
    dev = np.nanmax(np.abs(linear - 1.0))
    ok = all(v <= LAMBDA_MAX for v in lam.values()) and dev <= LINEAR_LAMBDA_TOL
    record(verdicts, 5, ok, f"max Lambda (k>=2) exact={lam['exact']:.4f} inexact={lam['inexact']:.4f} "
           f"<= {LAMBDA_MAX}; linear |Lambda-1| max={dev:.2e} over {np.isfinite(linear).sum()} steps")


def test_criterion_6_linf_uniformity(pbe_cube, pbe_jump, verdicts):
    parts, ok = [], True
    for name, records in (("pbe", pbe_cube["inexact"][0]), ("pbe-jump", pbe_jump[0])):
        m = np.array([r.max_norm for r in records[3:]])
        spread = (m.max() - m.min()) / m.min()
        clamps = sum(r.clamp_events for r in records)
        ok &= spread < LINF_SPREAD and clamps == 0
        parts.append(f"{name}: spread={spread:.2e} clamps={clamps}")
    record(verdicts, 6, ok, "; ".join(parts) + f" (< {LINF_SPREAD}, 0)")


def test_criterion_7_estimator_properties(verdicts):
    rng = np.random.default_rng(7)
    mesh = build_cube_mesh([[-1, -1, -1], [1, 1, 1]], 4, cube_classifier(0.5), NEUMANN)

    spec = ProblemSpec(CoefficientField(2.0, 80.0, 0.0, 1.0), rhs=1.0, bc_type=NEUMANN)
    ind = estimate(mesh, rng.normal(size=mesh.n_vertices), spec)
    perm = rng.permutation(mesh.n_tets)
    split = ind.subset_sq(perm[:100]) + ind.subset_sq(perm[100:])
    additive = abs(ind.total_sq - ind.eta_sq.sum()) <= 1e-12 * ind.total_sq and np.isclose(
        split, ind.total_sq, rtol=1e-12, atol=0.0
    )

    slopes = []
    for bc in (DIRICHLET, NEUMANN):
        spec = ProblemSpec(CoefficientField(2.0, 80.0, 0.5, 1.0), rhs=1.0, bc_type=bc)
        u = rng.uniform(-2, 2, mesh.n_vertices)
        v = rng.uniform(-1, 1, mesh.n_vertices)
        v[fem.constrained_vertices(mesh, spec)] = 0.0
        r0, jac = fem.newton_system(mesh, u, spec)
        hs = np.logspace(-2, -4, 5)
        err = [np.linalg.norm(fem.assemble_residual(mesh, u + h * v, spec) - r0 - h * (jac @ v)) for h in hs]
        slopes.append(np.polyfit(np.log(hs), np.log(err), 1)[0])
    fd_ok = all(abs(s - 2.0) <= FD_SLOPE_RTOL * 2.0 for s in slopes)

    dorfler_ok, worst = True, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 10_000))
        eta = rng.lognormal(0.0, 3.0, n)
        theta = float(rng.uniform(0.05, 1.0))
        marks = dorfler_mark(ErrorIndicators(0, eta, float(eta.sum())), theta)
        greedy = sorted_greedy_count(eta, theta)
        worst = max(worst, len(marks) / greedy)
        dorfler_ok &= eta[marks.ids].sum() >= theta**2 * eta.sum() * (1 - 1e-12) and len(marks) <= 2 * greedy
    ok = additive and fd_ok and dorfler_ok
    record(verdicts, 7, ok, f"additivity={'ok' if additive else 'broken'}; FD slopes "
           f"{', '.join(f'{s:.3f}' for s in slopes)} (2 +- 5%); Doerfler 100 vectors "
           f"{'ok' if dorfler_ok else 'violated'}, worst size/greedy={worst:.2f}")


def test_criterion_8_linear_time_phases(corner, verdicts):
    ratios = {}
    for m in MODES:
        records = corner[m][0]
        per_tet = np.array([r.t_nonsolver / r.tets for r in records])
        tets = np.array([r.tets for r in records])
        sel = per_tet[tets >= TIMING_MIN_TETS]
        ratios[m] = float(np.max(np.maximum(sel / per_tet[-1], per_tet[-1] / sel)))
    ok = all(v <= TIMING_RATIO for v in ratios.values())
    record(verdicts, 8, ok, f"max per-tet time ratio exact={ratios['exact']:.2f} "
           f"inexact={ratios['inexact']:.2f} <= {TIMING_RATIO}")


def test_criterion_9_refinement_locality(corner, pbe_cube, pbe_jump, verdicts):
    cube_records, cube_share = pbe_cube["inexact"]
    jump_records, jump_share = pbe_jump
    n_cube = np.log([r.vertices for r in cube_records])
    n_jump = np.log([r.vertices for r in jump_records])
    # matched N: the cube curve interpolated in log N at every refined jump level inside its range
    sel = (np.arange(n_jump.size) > 0) & (n_jump >= n_cube[0]) & (n_jump <= n_cube[-1])
    cube_at = np.interp(n_jump[sel], n_cube, cube_share)
    higher = jump_share[sel] > cube_at
    near = {m: corner[m][1] for m in MODES}
    drops = {m: np.diff(v) for m, v in near.items()}
    monotone = all(np.all(d >= 0) for d in drops.values())
    ok = bool(higher.all()) and monotone
    worst = min(d.min() for d in drops.values())
    record(verdicts, 9, ok, f"pbe-jump interface share higher at {higher.sum()}/{higher.size} matched N "
           f"(final {jump_share[-1]:.4f} vs {cube_share[-1]:.4f}); corner near-origin share monotone={monotone} "
           f"({near['exact'][0]:.4f} -> {near['exact'][-1]:.4f}, "
           f"{sum(int((d < 0).sum()) for d in drops.values())} decreasing steps, largest drop {-worst:.4f})")
