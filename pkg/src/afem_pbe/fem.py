"""Piecewise-linear finite elements for ``-div(eps grad u) + kappa^2 sinh(u) = f``.

All assembly is vectorized over tets.  Global matrices are built from a
per-mesh cached sparsity pattern with :func:`numpy.bincount`, which sums
contributions in tet order and is therefore bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import DIRICHLET, MOLECULAR, NEUMANN, Mesh
from .quadrature import adaptive_integrate, tet_rule

#: ``|u|`` is clamped to this value inside sinh/cosh.
CLAMP = 250.0

#: Tolerances of the adaptive source and exact-gradient integrals.  The
#: energy-error moments are tighter: the error itself is a small difference.
#: The indicator only needs a few digits.
LOAD_RTOL = 1e-5
ERROR_RTOL = 1e-8
INDICATOR_RTOL = 1e-3

_CHUNK = 131072


class MeshMismatchError(ValueError):
    """An FeFunction was combined with a mesh it does not live on."""


@dataclass(frozen=True)
class CoefficientField:
    eps_m: float
    eps_s: float
    kappa2_m: float
    kappa2_s: float

    def __post_init__(self):
        if not (self.eps_m > 0 and self.eps_s > 0):
            raise ValueError("diffusion coefficients must be positive")
        if self.kappa2_m < 0 or self.kappa2_s < 0:
            raise ValueError("kappa^2 must be nonnegative")

    def eps(self, mesh: Mesh) -> np.ndarray:
        return np.where(mesh.region == MOLECULAR, self.eps_m, self.eps_s)

    def kappa2(self, mesh: Mesh) -> np.ndarray:
        return np.where(mesh.region == MOLECULAR, self.kappa2_m, self.kappa2_s)


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, source, boundary data and (optionally) the exact solution.

    ``rhs`` is a constant or a vectorized callable ``(..., 3) -> (...)``;
    ``bc_data`` likewise (``None`` means homogeneous).  ``exact_solution``
    and ``exact_gradient`` are vectorized callables when known.
    """

    coefficients: CoefficientField
    rhs: float | Callable = 0.0
    bc_type: int = DIRICHLET
    bc_data: Callable | None = None
    exact_solution: Callable | None = None
    exact_gradient: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.bc_type not in (DIRICHLET, NEUMANN):
            raise ValueError(f"unknown boundary condition type {self.bc_type}")
        if self.bc_type == NEUMANN and not self.coefficients.kappa2_s > 0:
            raise ValueError("pure Neumann problems need kappa2_s > 0")


@dataclass(eq=False)
class FeFunction:
    """Vertex values of a P1 function on a specific mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mesh.n_vertices,):
            raise MeshMismatchError(
                f"{self.values.shape[0]} values for a mesh with "
                f"{self.mesh.n_vertices} vertices"
            )

    @property
    def generation(self) -> int:
        return self.mesh.generation_id

    def copy(self) -> "FeFunction":
        return FeFunction(self.mesh, self.values.copy())

    def __sub__(self, other: "FeFunction") -> "FeFunction":
        if other.mesh is not self.mesh:
            raise MeshMismatchError("FeFunctions live on different meshes")
        return FeFunction(self.mesh, self.values - other.values)


@dataclass
class AssemblyStats:
    clamp_events: int = 0


@dataclass
class SparseSystem:
    """Linear system with Dirichlet constraints recorded.

    After :func:`apply_dirichlet`, constrained rows and columns are identity
    and ``rhs`` holds the prescribed values there.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))


# --------------------------------------------------------------------------
# helpers


def _cache(mesh: Mesh) -> dict:
    return mesh.__dict__.setdefault("_fem_cache", {})


def _pattern(mesh: Mesh):
    """CSR structure and the slot of every local (t, i, j) entry."""
    cache = _cache(mesh)
    if "pattern" not in cache:
        nv, nt = mesh.n_vertices, mesh.n_tets
        tets = mesh.tets
        incidence = sp.csr_matrix(
            (np.ones(4 * nt, dtype=np.int8), tets.ravel(), np.arange(0, 4 * nt + 1, 4)), shape=(nt, nv)
        )
        graph = (incidence.T @ incidence).tocsr()
        graph.sort_indices()
        indptr = graph.indptr.astype(np.int64)
        indices = graph.indices.astype(np.int32)
        del graph, incidence
        keys = np.repeat(np.arange(nv, dtype=np.int64) * nv, np.diff(indptr)) + indices
        slot = np.empty((nt, 16), dtype=np.int64)
        for sl in _chunks(nt):
            t = tets[sl].astype(np.int64)
            local = (t[:, :, None] * nv + t[:, None, :]).reshape(-1, 16)
            slot[sl] = np.searchsorted(keys, local)
        cache["pattern"] = (indptr, indices, slot.ravel())
    return cache["pattern"]


def _assemble_matrix(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    indptr, indices, slot = _pattern(mesh)
    data = np.bincount(slot, weights=local.ravel(), minlength=indices.shape[0])
    n = mesh.n_vertices
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def _assemble_vector(mesh: Mesh, local: np.ndarray) -> np.ndarray:
    return np.bincount(mesh.tets.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def _values(u, mesh: Mesh) -> np.ndarray:
    if isinstance(u, FeFunction):
        if u.mesh is not mesh:
            raise MeshMismatchError(
                f"function on generation {u.generation} used on generation {mesh.generation_id}"
            )
        return u.values
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (mesh.n_vertices,):
        raise MeshMismatchError("vertex vector has the wrong length")
    return u


def _chunks(n: int):
    for start in range(0, n, _CHUNK):
        yield slice(start, min(start + _CHUNK, n))


def evaluate(func, points: np.ndarray) -> np.ndarray:
    """Evaluate a constant or vectorized callable at ``points`` (..., 3)."""
    if callable(func):
        return np.asarray(func(points), dtype=np.float64)
    return np.full(points.shape[:-1], float(func))


def _clamped(uq: np.ndarray, stats: AssemblyStats | None):
    over = np.abs(uq) > CLAMP
    if over.any():
        if stats is not None:
            stats.clamp_events += int(over.sum())
        uq = np.clip(uq, -CLAMP, CLAMP)
    return uq


def interpolate(mesh: Mesh, func) -> FeFunction:
    """Nodal interpolant of a constant or vectorized callable."""
    return FeFunction(mesh, evaluate(func, mesh.coords))


def constrained_vertices(mesh: Mesh, spec: ProblemSpec) -> np.ndarray:
    if spec.bc_type != DIRICHLET:
        return np.zeros(0, dtype=np.int64)
    return mesh.boundary_vertices(DIRICHLET)


def boundary_values(mesh: Mesh, spec: ProblemSpec, idx: np.ndarray) -> np.ndarray:
    if spec.bc_data is None:
        return np.zeros(idx.shape[0])
    return evaluate(spec.bc_data, mesh.coords[idx])


# --------------------------------------------------------------------------
# assembly


def assemble_stiffness(mesh: Mesh, coeff: CoefficientField) -> sp.csr_matrix:
    """``A[i, j] = sum_T eps_T int_T grad phi_i . grad phi_j`` (exact)."""
    cache = _cache(mesh)
    key = ("stiffness", coeff)
    if key not in cache:
        grads, vol = mesh.geometry
        local = np.einsum("tid,tjd->tij", grads, grads) * (coeff.eps(mesh) * vol)[:, None, None]
        cache[key] = _assemble_matrix(mesh, local)
    return cache[key]


def assemble_mass(mesh: Mesh, weight=None) -> sp.csr_matrix:
    """Exact P1 mass matrix ``V/20 (1 + delta_ij)`` per tet, times a per-tet weight."""
    vol = mesh.volumes if weight is None else mesh.volumes * weight
    local = (np.ones((4, 4)) + np.eye(4))[None] * (vol / 20.0)[:, None, None]
    return _assemble_matrix(mesh, local)


_MOMENT_KINDS = ("load", "gradient-moments")


def _moments(mesh: Mesh, kind: str, func, integrand, rtol: float) -> np.ndarray:
    """Adaptive per-tet integrals of ``integrand``, cached per mesh and ``func``.

    Rows seeded by :func:`inherit_moments` are reused; only the remaining
    tets are integrated, with the parent's tolerance scale.
    """
    key = (kind, id(func))
    cache = _cache(mesh)
    hit = cache.get(key)
    if hit is not None and hit[0] is func:
        return hit[1]
    floor = mesh.volumes.sum() / mesh.n_tets
    seed = cache.pop(("inherited",) + key, None)
    if seed is not None and seed[0] is func:
        _, keep, kept, scale = seed
        out = np.empty((mesh.n_tets, kept.shape[1]))
        out[keep] = kept
        new = np.flatnonzero(~keep)
        out[new] = adaptive_integrate(
            mesh.coords, mesh.tets[new], mesh.volumes[new], integrand, rtol, scale=scale, floor=floor
        )
    else:
        out = adaptive_integrate(mesh.coords, mesh.tets, mesh.volumes, integrand, rtol, floor=floor)
        scale = np.abs(out).max(axis=1).sum() / mesh.volumes.sum()
    cache[key] = (func, out, scale)
    return out


def inherit_moments(parent: Mesh, child: Mesh) -> None:
    """Seed ``child``'s moment caches with the tets bisection left untouched.

    ``child`` must come from a single :func:`bisect` of ``parent``.
    """
    anc = child.tet_ancestor
    if anc is None or child.lineage[-2:-1] != (parent.uid,):
        return
    keep = child.generation == parent.generation[anc]
    target = _cache(child)
    for key, entry in _cache(parent).items():
        if key[0] in _MOMENT_KINDS:
            func, values, scale = entry
            target[("inherited",) + key] = (func, keep, values[anc[keep]], scale)


def load_moments(mesh: Mesh, rhs) -> np.ndarray:
    """``int_T f lambda_i`` per tet ``(nt, 4)``, cached per mesh.

    Callable sources are integrated adaptively (see
    :func:`adaptive_integrate`), so the load is consistent across meshes even
    where ``f`` is sharply peaked at the scale of a tet.
    """
    if not callable(rhs):
        return np.broadcast_to((mesh.volumes * (float(rhs) / 4.0))[:, None], (mesh.n_tets, 4))
    return _moments(mesh, "load", rhs, lambda pts, bary, ids: evaluate(rhs, pts)[..., None] * bary, LOAD_RTOL)


def prepare(mesh: Mesh, spec: ProblemSpec) -> None:
    """Build the per-mesh pattern, stiffness and load caches."""
    assemble_stiffness(mesh, spec.coefficients)
    if spec.rhs is not None:
        load_moments(mesh, spec.rhs)


def _nonlinear_local(mesh, u, kappa2, rhs, rule, stats, want_jac):
    """Per-tet nonlinear-minus-load vector and (optionally) cosh-weighted mass."""
    lam = rule.points  # (q, 4)
    w = rule.weights
    prod = (lam[:, :, None] * lam[:, None, :]).reshape(len(rule), 16)
    vol = mesh.volumes
    vec = np.empty((mesh.n_tets, 4))
    jac = np.empty((mesh.n_tets, 16)) if want_jac else None
    for sl in _chunks(mesh.n_tets):
        uq = u[mesh.tets[sl]] @ lam.T  # (c, q)
        uq = _clamped(uq, stats)
        k2 = kappa2[sl, None]
        vec[sl] = ((k2 * np.sinh(uq) * w) @ lam) * vol[sl, None]
        if want_jac:
            jac[sl] = ((k2 * np.cosh(uq) * w) @ prod) * vol[sl, None]
    if rhs is not None:
        vec -= load_moments(mesh, rhs)
    return vec, jac


def assemble_load(mesh: Mesh, rhs) -> np.ndarray:
    """``int f phi_i`` (exact for constants, adaptive quadrature otherwise)."""
    return _assemble_vector(mesh, load_moments(mesh, rhs))


def assemble_residual(
    mesh: Mesh,
    u,
    spec: ProblemSpec,
    degree: int = 4,
    stats: AssemblyStats | None = None,
) -> np.ndarray:
    """Nonlinear residual ``a(u, phi_i) + (kappa^2 sinh u, phi_i) - (f, phi_i)``.

    Entries at Dirichlet vertices are zero.
    """
    u = _values(u, mesh)
    coeff = spec.coefficients
    rule = tet_rule(degree)
    vec, _ = _nonlinear_local(mesh, u, coeff.kappa2(mesh), spec.rhs, rule, stats, False)
    r = assemble_stiffness(mesh, coeff) @ u + _assemble_vector(mesh, vec)
    r[constrained_vertices(mesh, spec)] = 0.0
    return r


def assemble_jacobian(
    mesh: Mesh,
    u,
    coeff: CoefficientField,
    degree: int = 4,
    stats: AssemblyStats | None = None,
) -> sp.csr_matrix:
    """``A + M(u)`` with ``M(u)[i, j] = int kappa^2 cosh(u) phi_i phi_j``."""
    u = _values(u, mesh)
    kappa2 = coeff.kappa2(mesh)
    stiff = assemble_stiffness(mesh, coeff)
    if not np.any(kappa2):
        return stiff.copy()
    _, jac = _nonlinear_local(mesh, u, kappa2, None, tet_rule(degree), stats, True)
    mass = _assemble_matrix(mesh, jac)
    # identical sparsity, so the sum is entrywise on ``data``
    return sp.csr_matrix((stiff.data + mass.data, stiff.indices, stiff.indptr), shape=stiff.shape)


def newton_system(
    mesh: Mesh,
    u,
    spec: ProblemSpec,
    degree: int = 4,
    stats: AssemblyStats | None = None,
):
    """Residual and Jacobian at ``u`` in one quadrature pass."""
    u = _values(u, mesh)
    coeff = spec.coefficients
    kappa2 = coeff.kappa2(mesh)
    stiff = assemble_stiffness(mesh, coeff)
    want = bool(np.any(kappa2))
    vec, jac = _nonlinear_local(mesh, u, kappa2, spec.rhs, tet_rule(degree), stats, want)
    r = stiff @ u + _assemble_vector(mesh, vec)
    r[constrained_vertices(mesh, spec)] = 0.0
    if want:
        data = stiff.data + _assemble_matrix(mesh, jac).data
        J = sp.csr_matrix((data, stiff.indices, stiff.indptr), shape=stiff.shape)
    else:
        J = stiff.copy()
    return r, J


def apply_dirichlet(system: SparseSystem, constrained: np.ndarray, values) -> SparseSystem:
    """Symmetric elimination of the ``constrained`` unknowns.

    Constrained rows and columns become identity; their coupling moves to
    the right-hand side and the rhs entry holds the prescribed value.
    """
    A = system.matrix.tocsr()
    n = A.shape[0]
    constrained = np.asarray(constrained, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), constrained.shape)
    free = np.ones(n, dtype=bool)
    free[constrained] = False
    g = np.zeros(n)
    g[constrained] = values
    rhs = system.rhs - A @ g
    rhs[constrained] = values
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    data = A.data * (free[rows] & free[A.indices])
    diag = (rows == A.indices) & ~free[rows]
    data[diag] = 1.0
    M = sp.csr_matrix((data, A.indices.copy(), A.indptr.copy()), shape=A.shape)
    missing = constrained[np.asarray(M.diagonal()[constrained] == 0.0)]
    if missing.size:
        M = M + sp.csr_matrix((np.ones(missing.size), (missing, missing)), shape=A.shape)
    return SparseSystem(M, rhs, constrained, np.array(values))


# --------------------------------------------------------------------------
# norms and transfer


def gradient(mesh: Mesh, u) -> np.ndarray:
    """Elementwise-constant gradient ``(nt, 3)``."""
    u = _values(u, mesh)
    return np.einsum("ti,tid->td", u[mesh.tets], mesh.geometry[0])


def energy_norm_sq(mesh: Mesh, w, coeff: CoefficientField, degree: int = 4) -> float:
    """``int eps |grad w|^2`` for a P1 function or a gradient callable."""
    eps = coeff.eps(mesh)
    if callable(w):
        rule = tet_rule(degree)
        total = 0.0
        for sl in _chunks(mesh.n_tets):
            g = w(rule.physical_points(mesh.coords, mesh.tets[sl]))
            total += float((((g * g).sum(axis=-1) @ rule.weights) * mesh.volumes[sl] * eps[sl]).sum())
        return total
    g = gradient(mesh, w)
    return float(((g * g).sum(axis=1) * mesh.volumes * eps).sum())


def energy_error_sq(mesh: Mesh, u_h, exact_gradient, coeff: CoefficientField) -> float:
    """``int eps |grad u - grad u_h|^2`` with ``grad u`` analytic.

    Uses per-tet moments ``int |grad u|^2`` and ``int grad u``, integrated
    adaptively; they do not depend on ``u_h``.
    """
    gh = gradient(mesh, u_h)
    mom = exact_gradient_moments(mesh, exact_gradient)
    local = mom[:, 0] - 2.0 * (gh * mom[:, 1:]).sum(axis=1) + (gh * gh).sum(axis=1) * mesh.volumes
    return float((np.maximum(local, 0.0) * coeff.eps(mesh)).sum())


def exact_gradient_moments(mesh: Mesh, exact_gradient) -> np.ndarray:
    """Per tet ``[int |g|^2, int g]`` for a gradient callable ``g``, ``(nt, 4)``, cached."""

    def integrand(pts, bary, ids):
        g = exact_gradient(pts)
        return np.concatenate([(g * g).sum(axis=-1, keepdims=True), g], axis=-1)

    return _moments(mesh, "gradient-moments", exact_gradient, integrand, ERROR_RTOL)


def local_energy_sq(mesh: Mesh, w, coeff: CoefficientField) -> np.ndarray:
    """Per-tet ``eps |grad w|^2 |T|``."""
    g = gradient(mesh, w)
    return (g * g).sum(axis=1) * mesh.volumes * coeff.eps(mesh)


def max_norm(u) -> float:
    values = u.values if isinstance(u, FeFunction) else np.asarray(u)
    return float(np.abs(values).max()) if values.size else 0.0


def prolongate(u: FeFunction, target: Mesh) -> FeFunction:
    """Exact P1 embedding of ``u`` into a refinement ``target`` of its mesh."""
    if not u.mesh.is_ancestor_of(target):
        raise MeshMismatchError(
            f"generation {u.generation} is not an ancestor of generation {target.generation_id}"
        )
    nv0 = u.mesh.n_vertices
    vals = np.empty(target.n_vertices)
    vals[:nv0] = u.values
    if target.n_vertices == nv0:
        return FeFunction(target, vals)
    par = target.vertex_parents[nv0:]
    idx = np.arange(nv0, target.n_vertices)
    done = np.zeros(target.n_vertices, dtype=bool)
    done[:nv0] = True
    pending = np.ones(idx.shape[0], dtype=bool)
    while pending.any():
        ready = pending & done[par[:, 0]] & done[par[:, 1]]
        sel = idx[ready]
        vals[sel] = 0.5 * (vals[par[ready, 0]] + vals[par[ready, 1]])
        done[sel] = True
        pending &= ~ready
    return FeFunction(target, vals)


def write_fefunction(u: FeFunction, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"fefunction {u.generation} {u.values.shape[0]}\n")
        fh.writelines(f"{v:.17g}\n" for v in u.values)


def read_fefunction(path, mesh: Mesh) -> FeFunction:
    with open(path) as fh:
        word, gen, count = fh.readline().split()
        if word != "fefunction":
            raise ValueError("not an fefunction file")
        values = np.loadtxt(fh, ndmin=1)
    if int(gen) != mesh.generation_id or int(count) != mesh.n_vertices:
        raise MeshMismatchError("dump does not match the given mesh")
    return FeFunction(mesh, values)
