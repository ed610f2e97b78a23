"""Quadrature rules on the reference tetrahedron in barycentric coordinates.

Weights are normalized to sum to one, so ``sum(w * f(x_q)) * |T|``
approximates the integral of ``f`` over a tet ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (q, 4) barycentric coordinates
    weights: np.ndarray  # (q,), sum to 1
    degree: int

    def __len__(self):
        return self.weights.shape[0]

    def physical_points(self, coords: np.ndarray, tets: np.ndarray) -> np.ndarray:
        """Quadrature points of every tet, shape ``(nt, q, 3)``."""
        return np.einsum("qi,tid->tqd", self.points, coords[tets], optimize=True)


def _orbit_aaab(a):
    b = 1.0 - 3.0 * a
    return [[b, a, a, a], [a, b, a, a], [a, a, b, a], [a, a, a, b]]


def _orbit_aabb(a):
    b = 0.5 - a
    return [
        [a, a, b, b], [a, b, a, b], [a, b, b, a],
        [b, a, a, b], [b, a, b, a], [b, b, a, a],
    ]


def _fourteen_point():
    # Positive-weight 14-point rule, exact for degree 5.
    a1, w1 = 0.0927352503108912264, 0.01224884051939365826
    a2, w2 = 0.3108859192633006098, 0.01878132095300264180
    a3, w3 = 0.0455037041256496495, 0.00709100346284691107
    pts = _orbit_aaab(a1) + _orbit_aaab(a2) + _orbit_aabb(a3)
    w = [w1] * 4 + [w2] * 4 + [w3] * 6
    return QuadratureRule(np.array(pts), 6.0 * np.array(w), 5)


def conical_product_rule(n: int) -> QuadratureRule:
    """Collapsed-cube Gauss-Jacobi rule with ``n**3`` points, degree ``2n - 1``."""
    pts, wts = [], []
    rules = []
    for alpha in (2.0, 1.0, 0.0):
        t, w = roots_jacobi(n, alpha, 0.0)
        rules.append(((1.0 + t) / 2.0, w / 2.0 ** (alpha + 1.0)))
    (u, wu), (v, wv), (s, ws) = rules
    for i in range(n):
        for j in range(n):
            for k in range(n):
                x = u[i]
                y = v[j] * (1.0 - u[i])
                z = s[k] * (1.0 - u[i]) * (1.0 - v[j])
                pts.append([1.0 - x - y - z, x, y, z])
                wts.append(wu[i] * wv[j] * ws[k])
    wts = np.array(wts)
    return QuadratureRule(np.array(pts), wts / wts.sum(), 2 * n - 1)


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> QuadratureRule:
    """Cheapest available rule exact for polynomials of total degree ``degree``."""
    if degree <= 5:
        return _fourteen_point()
    return conical_product_rule((degree + 2) // 2)


# Red (8-child) subdivision: rows index [v0, v1, v2, v3, m01, m02, m03, m12, m13, m23].
_MIDPOINTS = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
_RED_CHILDREN = np.array(
    [
        [0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3],
        [4, 5, 6, 8], [4, 5, 7, 8], [5, 6, 8, 9], [5, 7, 8, 9],
    ]
)
_ITEM_CHUNK = 65536


def _red_split(sub: np.ndarray) -> np.ndarray:
    """Children of sub-tets given as barycentric vertex rows ``(k, 4, 4)``."""
    mids = 0.5 * (sub[:, _MIDPOINTS[:, 0]] + sub[:, _MIDPOINTS[:, 1]])
    allv = np.concatenate([sub, mids], axis=1)  # (k, 10, 4)
    return allv[:, _RED_CHILDREN].reshape(-1, 4, 4)


def _sub_integrals(coords, tets, volumes, integrand, ids, sub, frac, rules):
    """Integrals of ``integrand`` over sub-tets with each rule, ``[(k, m), ...]``."""
    corners = coords[tets[ids]]  # (k, 4, 3)
    out = []
    for rule in rules:
        bary = rule.points @ sub  # (k, q, 4)
        g = np.asarray(integrand(bary @ corners, bary, ids), dtype=np.float64)
        out.append((rule.weights @ g) * (volumes[ids] * frac)[:, None])
    return out


def adaptive_integrate(
    coords, tets, volumes, integrand, rtol: float = 1e-10, max_depth: int = 16, scale=None, floor=None, check_degree=5
):
    """Per-tet integrals of a vector integrand with recursive red refinement.

    ``integrand(points, bary, ids)`` receives physical points ``(k, q, 3)``,
    barycentric coordinates in the parent tet ``(k, q, 4)`` and the parent
    tet indices ``(k,)``, and returns ``(k, q, m)``.  Each tet is integrated with the degree-5 rule and checked
    against a degree-3 rule.  A piece that fails is split into its 8 red
    children; the children's degree-5 sum is accepted once it agrees with
    the piece's own degree-5 value, otherwise the children are split in
    turn.  The tolerance per piece is ``rtol * S * max(|piece|, floor)``,
    ``S`` the mean absolute integrand density over the given tets (unless
    ``scale`` is passed) and ``floor`` by default the mean tet volume; the
    floor keeps narrow peaks from driving the split count up without bound.
    Returns ``(nt, m)``.
    """
    hi_rule, lo_rule = tet_rule(4), conical_product_rule((check_degree + 1) // 2)
    nt = tets.shape[0]
    eye = np.broadcast_to(np.eye(4), (nt, 4, 4))
    result = np.empty((nt, 0))
    err = np.empty(nt)
    for start in range(0, nt, _ITEM_CHUNK):
        sl = slice(start, min(start + _ITEM_CHUNK, nt))
        hi, lo = _sub_integrals(coords, tets, volumes, integrand, np.arange(sl.start, sl.stop), eye[sl], 1.0, (hi_rule, lo_rule))
        if result.shape[1] != hi.shape[1]:
            result = np.empty((nt, hi.shape[1]))
        result[sl] = hi
        err[sl] = np.abs(hi - lo).max(axis=1)
    if nt == 0:
        return result
    if scale is None:
        scale = np.abs(result).max(axis=1).sum() / volumes.sum()
    scale = max(scale, np.finfo(float).tiny)
    if floor is None:
        floor = volumes.sum() / nt
    # pending pieces: owning tet, barycentric vertices and their own degree-5 value
    ids = np.flatnonzero(err > rtol * scale * np.maximum(volumes, floor))
    sub = eye[ids]
    own = result[ids]
    result[ids] = 0.0
    depth = 0
    while ids.size:
        depth += 1
        frac = 8.0**-depth
        next_ids, next_sub, next_own = [], [], []
        step = _ITEM_CHUNK // 8
        for start in range(0, ids.size, step):
            cid, csub, cown = ids[start : start + step], sub[start : start + step], own[start : start + step]
            kids = _red_split(csub)
            kid_ids = np.repeat(cid, 8)
            (vals,) = _sub_integrals(coords, tets, volumes, integrand, kid_ids, kids, frac, (hi_rule,))
            total = vals.reshape(cid.size, 8, -1).sum(axis=1)
            tol = rtol * scale * np.maximum(volumes[cid] * frac * 8.0, floor)
            ok = (np.abs(total - cown).max(axis=1) <= tol) | (depth >= max_depth)
            np.add.at(result, cid[ok], total[ok])
            bad = np.repeat(~ok, 8)
            if bad.any():
                next_ids.append(kid_ids[bad])
                next_sub.append(kids[bad])
                next_own.append(vals[bad])
        if not next_ids:
            break
        ids, sub, own = np.concatenate(next_ids), np.concatenate(next_sub), np.concatenate(next_own)
    return result
