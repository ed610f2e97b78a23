"""Residual error indicator and binned Dörfler marking."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import CoefficientField, ProblemSpec
from .mesh import NEUMANN, Mesh
from .quadrature import adaptive_integrate, tet_rule


@dataclass(frozen=True)
class ErrorIndicators:
    mesh_generation: int
    eta_sq: np.ndarray
    total_sq: float

    def subset_sq(self, ids) -> float:
        return float(self.eta_sq[np.asarray(ids, dtype=np.int64)].sum())

    @property
    def total(self) -> float:
        return float(np.sqrt(self.total_sq))


@dataclass(frozen=True)
class MarkSet:
    ids: np.ndarray
    achieved_fraction: float
    theta: float

    def __len__(self):
        return self.ids.shape[0]


def _face_geometry(mesh: Mesh, faces: np.ndarray):
    """Unit normals, areas and diameters of the given face vertex triples."""
    p = mesh.coords[faces]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    twice_area = np.linalg.norm(cross, axis=1)
    normal = cross / twice_area[:, None]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 2] - p[:, 1]], axis=1)
    diam = np.sqrt((e * e).sum(axis=2).max(axis=1))
    return normal, 0.5 * twice_area, diam


def volume_residual_sq(mesh: Mesh, u, spec: ProblemSpec, degree: int = 4) -> np.ndarray:
    """Per-tet ``||kappa^2 sinh(u) - f||^2``.

    Constant sources use the fixed degree-``degree`` rule; callable ones are
    integrated adaptively, so an under-resolved peak in ``f`` cannot make the
    indicator grow under refinement.
    """
    u = u.values if isinstance(u, fem.FeFunction) else np.asarray(u)
    kappa2 = spec.coefficients.kappa2(mesh)
    if callable(spec.rhs):

        def integrand(pts, bary, ids):
            uq = np.clip(np.einsum("kqi,ki->kq", bary, u[mesh.tets[ids]]), -fem.CLAMP, fem.CLAMP)
            g = kappa2[ids, None] * np.sinh(uq) - fem.evaluate(spec.rhs, pts)
            return (g * g)[..., None]

        return adaptive_integrate(mesh.coords, mesh.tets, mesh.volumes, integrand, fem.INDICATOR_RTOL, check_degree=3)[:, 0]
    rule = tet_rule(degree)
    out = np.empty(mesh.n_tets)
    for sl in fem._chunks(mesh.n_tets):
        uq = np.clip(u[mesh.tets[sl]] @ rule.points.T, -fem.CLAMP, fem.CLAMP)
        g = kappa2[sl, None] * np.sinh(uq) - float(spec.rhs)
        out[sl] = (g * g) @ rule.weights * mesh.volumes[sl]
    return out


def flux_jump_sq(mesh: Mesh, u, coeff: CoefficientField) -> np.ndarray:
    """Per-tet sum of ``h_e ||[eps grad u . n]||^2_e`` over its faces.

    Interior faces count for both neighbors; homogeneous-Neumann faces
    contribute the full normal flux; Dirichlet faces contribute nothing.
    """
    flux = fem.gradient(mesh, u) * coeff.eps(mesh)[:, None]
    ft = mesh.faces
    normal, area, diam = _face_geometry(mesh, ft.vertices)
    t0, t1 = ft.face_tets[:, 0], ft.face_tets[:, 1]
    interior = t1 >= 0
    jump = np.zeros(ft.vertices.shape[0])
    jump[interior] = ((flux[t0[interior]] - flux[t1[interior]]) * normal[interior]).sum(axis=1)
    ext = ~interior
    neumann = np.zeros(ft.vertices.shape[0], dtype=bool)
    neumann[ext] = mesh.face_tags[t0[ext], ft.face_local[ext, 0]] == NEUMANN
    jump[neumann] = (flux[t0[neumann]] * normal[neumann]).sum(axis=1)
    contrib = diam * area * jump * jump
    out = np.bincount(t0, weights=contrib, minlength=mesh.n_tets)
    out += np.bincount(t1[interior], weights=contrib[interior], minlength=mesh.n_tets)
    return out


def estimate(mesh: Mesh, u, spec: ProblemSpec, degree: int = 4) -> ErrorIndicators:
    """Residual indicator ``h_T^2 ||b(u) - f||_T^2 + sum_e h_e ||[eps du/dn]||_e^2``."""
    h = mesh.diameters
    eta_sq = h * h * volume_residual_sq(mesh, u, spec, degree)
    eta_sq += flux_jump_sq(mesh, u, spec.coefficients)
    return ErrorIndicators(mesh.generation_id, eta_sq, float(eta_sq.sum()))


def dorfler_mark(indicators: ErrorIndicators, theta: float, n_bins: int = 64) -> MarkSet:
    """Binned Dörfler marking: ``eta^2(M) >= theta^2 eta^2(T)``.

    Elements go into bins ``floor(log2(eta_max^2 / eta^2))`` (everything
    below ``2**-(n_bins-1)`` of the maximum shares the last bin).  Bins are
    consumed from the top; the last bin needed is consumed in index order
    only as far as the condition requires.  Radix-sorted, so linear time.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    eta = indicators.eta_sq
    total = float(eta.sum())
    positive = np.flatnonzero(eta > 0)
    if total <= 0.0 or positive.size == 0:
        return MarkSet(np.zeros(0, dtype=np.int64), 0.0, theta)
    if theta >= 1.0:
        return MarkSet(positive, 1.0, theta)
    vals = eta[positive]
    logs = np.log2(vals)
    bins = np.minimum(np.floor(logs.max() - logs), n_bins - 1).astype(np.int16)
    order = positive[np.argsort(bins, kind="stable")]
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, theta * theta * total, side="left"))
    k = min(k, order.size - 1)
    ids = np.sort(order[: k + 1])
    return MarkSet(ids, float(csum[k] / total), theta)


def sorted_greedy_count(eta_sq: np.ndarray, theta: float) -> int:
    """Minimal number of elements satisfying the Dörfler condition."""
    vals = np.sort(np.asarray(eta_sq))[::-1]
    csum = np.cumsum(vals)
    total = vals.sum()
    if total <= 0:
        return 0
    return int(np.searchsorted(csum, theta * theta * total, side="left")) + 1


def effectivity(indicators: ErrorIndicators, true_energy_error_sq: float) -> float:
    """``eta_total / |||u - u_h|||``."""
    if not true_energy_error_sq > 0:
        raise ValueError("true energy error must be positive")
    if indicators.total_sq == 0.0:
        warnings.warn(
            "zero estimator with nonzero true error: reliability bound violated",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(np.sqrt(indicators.total_sq / true_energy_error_sq))


def vertex_patches(mesh: Mesh) -> sp.csr_matrix:
    """Tet-to-tet incidence for tets sharing at least one vertex."""
    nt = mesh.n_tets
    inc = sp.csr_matrix(
        (np.ones(4 * nt), (np.repeat(np.arange(nt), 4), mesh.tets.ravel())),
        shape=(nt, mesh.n_vertices),
    )
    adj = (inc @ inc.T).tocsr()
    adj.data[:] = 1.0
    return adj


def patch_energy_sq(mesh: Mesh, w, coeff: CoefficientField, patches=None) -> np.ndarray:
    """``|||w|||^2`` restricted to the vertex patch of every tet."""
    patches = vertex_patches(mesh) if patches is None else patches
    return patches @ fem.local_energy_sq(mesh, w, coeff)


def write_indicators(indicators: ErrorIndicators, path) -> None:
    """Text dump: ``eta <generation> <count>`` then one ``eta^2`` per line."""
    with open(path, "w") as fh:
        fh.write(f"eta {indicators.mesh_generation} {indicators.eta_sq.shape[0]}\n")
        fh.writelines(f"{v:.17g}\n" for v in indicators.eta_sq)


def read_indicators(path) -> ErrorIndicators:
    with open(path) as fh:
        word, gen, count = fh.readline().split()
        if word != "eta":
            raise ValueError("not an indicator file")
        eta = np.loadtxt(fh, ndmin=1)
    if eta.shape[0] != int(count):
        raise ValueError("indicator count mismatch")
    return ErrorIndicators(int(gen), eta, float(eta.sum()))
