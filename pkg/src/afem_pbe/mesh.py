"""Conforming tetrahedral meshes with region tags and longest-edge bisection.

A :class:`Mesh` is immutable by convention: :func:`bisect` returns a new mesh
and never touches its input.  Vertex ids are stable across refinement (new
vertices are appended), which is what makes prolongation by edge-midpoint
averaging exact.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels

SOLVENT = 0
MOLECULAR = 1

UNTAGGED = 0
DIRICHLET = 1
NEUMANN = 2

#: Local vertex triples of the face opposite local vertex ``i``.
FACE_OPPOSITE = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

_uid = itertools.count()

ClosureError = _kernels.ClosureError


class MeshError(ValueError):
    """Invalid mesh construction input."""


@dataclass(frozen=True, eq=False)
class FaceTopology:
    """Unique faces of a mesh and their adjacency.

    ``face_tets[f, 1] == -1`` marks a face with a single neighbor.
    """

    vertices: np.ndarray  # (nf, 3) sorted vertex ids
    tet_face: np.ndarray  # (nt, 4) face id of the face opposite local vertex i
    face_tets: np.ndarray  # (nf, 2)
    face_local: np.ndarray  # (nf, 2) local index (opposite vertex) in each tet
    counts: np.ndarray  # (nf,) number of tets sharing the face

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 2)

    @property
    def exterior(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Tetrahedral mesh with region tags, boundary face tags and genealogy.

    Parameters
    ----------
    coords : (nv, 3) float array
    tets : (nt, 4) int array, positively oriented
    region : (nt,) int8, ``SOLVENT`` or ``MOLECULAR``
    face_tags : (nt, 4) int8, tag of the face opposite each local vertex
        (``UNTAGGED`` for interior faces)
    generation : (nt,) int32, bisection depth from the level-0 ancestor
    vertex_parents : (nv, 2) int64, endpoints of the bisected edge that
        created the vertex, ``-1`` for initial vertices
    generation_id : number of refinements applied since the initial mesh
    lineage : uids of all ancestor meshes, oldest first, ending with this one
    tet_ancestor : index of the tet of the previous mesh each tet lies in
    box : (2, 3) bounding box of the domain
    """

    coords: np.ndarray
    tets: np.ndarray
    region: np.ndarray
    face_tags: np.ndarray
    generation: np.ndarray
    vertex_parents: np.ndarray
    box: np.ndarray
    generation_id: int = 0
    lineage: tuple = ()
    tet_ancestor: np.ndarray | None = None
    uid: int = field(default_factory=lambda: next(_uid))

    def __post_init__(self):
        if not self.lineage:
            object.__setattr__(self, "lineage", (self.uid,))

    @property
    def n_vertices(self) -> int:
        return self.coords.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def __repr__(self):
        return (
            f"Mesh(vertices={self.n_vertices}, tets={self.n_tets}, "
            f"generation_id={self.generation_id})"
        )

    def is_ancestor_of(self, other: "Mesh") -> bool:
        return self.uid in other.lineage

    @cached_property
    def geometry(self):
        """Barycentric gradients ``(nt, 4, 3)`` and volumes ``(nt,)``."""
        return barycentric_gradients(self.coords, self.tets)

    @property
    def volumes(self) -> np.ndarray:
        return self.geometry[1]

    @cached_property
    def faces(self) -> FaceTopology:
        return _face_topology(self.tets, self.n_vertices)

    @cached_property
    def boundary_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """Vertex triples and tags of all tagged boundary faces."""
        t, i = np.nonzero(self.face_tags)
        tri = self.tets[t[:, None], FACE_OPPOSITE[i]]
        return tri, self.face_tags[t, i]

    @cached_property
    def boundary_flag(self) -> np.ndarray:
        flag = np.zeros(self.n_vertices, dtype=bool)
        flag[self.boundary_faces[0].ravel()] = True
        return flag

    def boundary_vertices(self, tag: int | None = None) -> np.ndarray:
        tri, tags = self.boundary_faces
        if tag is not None:
            tri = tri[tags == tag]
        return np.unique(tri)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Longest edge length of every tet."""
        p = self.coords[self.tets]
        d = p[:, LOCAL_EDGES[:, 0]] - p[:, LOCAL_EDGES[:, 1]]
        return np.sqrt((d * d).sum(axis=2).max(axis=1))

    @property
    def barycenters(self) -> np.ndarray:
        return self.coords[self.tets].mean(axis=1)

    def interface_tets(self) -> np.ndarray:
        """Boolean mask of tets having at least one vertex on the interface."""
        on = np.zeros(self.n_vertices, dtype=bool)
        mol = np.unique(self.tets[self.region == MOLECULAR])
        sol = np.unique(self.tets[self.region == SOLVENT])
        on[np.intersect1d(mol, sol)] = True
        return on[self.tets].any(axis=1)

    def refinement_edge(self) -> np.ndarray:
        """Local index (into ``LOCAL_EDGES``) of each tet's bisection edge."""
        p = self.coords[self.tets]
        d = p[:, LOCAL_EDGES[:, 0]] - p[:, LOCAL_EDGES[:, 1]]
        len2 = (d * d).sum(axis=2)
        a = self.tets[:, LOCAL_EDGES[:, 0]]
        b = self.tets[:, LOCAL_EDGES[:, 1]]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        big = np.iinfo(np.int64).max
        cand = len2 == len2.max(axis=1, keepdims=True)
        lo = np.where(cand, lo, big)
        cand &= lo == lo.min(axis=1, keepdims=True)
        hi = np.where(cand, hi, big)
        return np.argmin(hi, axis=1)


def barycentric_gradients(coords: np.ndarray, tets: np.ndarray):
    """Gradients of the four barycentric coordinates and signed volumes."""
    p = coords[tets]
    jac = (p[:, 1:] - p[:, :1]).transpose(0, 2, 1)  # columns x1-x0, x2-x0, x3-x0
    det = np.linalg.det(jac)
    if np.any(det == 0.0):
        bad = int(np.flatnonzero(det == 0.0)[0])
        raise MeshError(f"degenerate tet {bad} (zero volume)")
    inv = np.linalg.inv(jac)
    grads = np.empty((tets.shape[0], 4, 3))
    grads[:, 1:] = inv  # rows of J^{-1} are the gradients of lambda_1..3
    grads[:, 0] = -inv.sum(axis=1)
    return grads, det / 6.0


def _pack_faces(tri: np.ndarray, nv: int) -> np.ndarray:
    tri = np.sort(tri, axis=1)
    if nv < 2**21:
        return (tri[:, 0] << 42) | (tri[:, 1] << 21) | tri[:, 2]
    return None


def _face_topology(tets: np.ndarray, nv: int) -> FaceTopology:
    nt = tets.shape[0]
    tri = np.sort(tets[:, FACE_OPPOSITE].reshape(-1, 3), axis=1)
    packed = _pack_faces(tri, nv)
    if packed is not None:
        _, first, inverse, counts = np.unique(
            packed, return_index=True, return_inverse=True, return_counts=True
        )
    else:
        _, first, inverse, counts = np.unique(
            tri, axis=0, return_index=True, return_inverse=True, return_counts=True
        )
    inverse = inverse.ravel()
    nf = first.shape[0]
    order = np.argsort(inverse, kind="stable")
    slot = np.empty(4 * nt, dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slot[order] = np.arange(4 * nt) - np.repeat(starts, counts)
    face_tets = np.full((nf, 2), -1, dtype=np.int64)
    face_local = np.full((nf, 2), -1, dtype=np.int64)
    keep = slot < 2
    idx = np.arange(4 * nt)[keep]
    face_tets[inverse[keep], slot[keep]] = idx // 4
    face_local[inverse[keep], slot[keep]] = idx % 4
    return FaceTopology(
        vertices=tri[first],
        tet_face=inverse.reshape(nt, 4),
        face_tets=face_tets,
        face_local=face_local,
        counts=counts,
    )


# Kuhn subdivision: tet (0, e_p0, e_p0+e_p1, 1) for each axis permutation p.
def _kuhn_tets():
    out = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=int)
        path = [corner.copy()]
        for ax in perm:
            corner[ax] = 1
            path.append(corner.copy())
        out.append(path)
    return np.array(out)  # (6, 4, 3) offsets in {0, 1}


KUHN_OFFSETS = _kuhn_tets()


def build_cube_mesh(box, n: int, classifier=None, boundary_tag: int = DIRICHLET) -> Mesh:
    """Kuhn subdivision of a uniform ``n**3`` grid of an axis-aligned box.

    Parameters
    ----------
    box : ((x0, y0, z0), (x1, y1, z1))
    n : subdivisions per axis
    classifier : callable mapping ``(m, 3)`` points to a boolean array,
        True for the molecular region; ``None`` means all solvent
    boundary_tag : tag given to every face on the box surface

    Raises
    ------
    MeshError
        If ``n < 1`` or some tet is cut by the classifier's interface.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    box = np.asarray(box, dtype=np.float64).reshape(2, 3)
    lo, hi = box
    ax = [np.linspace(lo[d], hi[d], n + 1) for d in range(3)]
    gi, gj, gk = np.meshgrid(np.arange(n + 1), np.arange(n + 1), np.arange(n + 1), indexing="ij")
    ijk = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)
    coords = np.stack([ax[0][ijk[:, 0]], ax[1][ijk[:, 1]], ax[2][ijk[:, 2]]], axis=1)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    ci, cj, ck = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    cells = np.stack([ci.ravel(), cj.ravel(), ck.ravel()], axis=1)
    tets = np.empty((cells.shape[0], 6, 4), dtype=np.int64)
    for t in range(6):
        for v in range(4):
            off = KUHN_OFFSETS[t, v]
            tets[:, t, v] = vid(cells[:, 0] + off[0], cells[:, 1] + off[1], cells[:, 2] + off[2])
    tets = tets.reshape(-1, 4)
    _, vol = barycentric_gradients(coords, tets)
    neg = vol < 0
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]

    nt = tets.shape[0]
    if classifier is None:
        region = np.full(nt, SOLVENT, dtype=np.int8)
    else:
        p = coords[tets]
        bary = p.mean(axis=1)
        samples = [bary] + [bary + 0.98 * (p[:, v] - bary) for v in range(4)]
        samples += [bary + 0.98 * (0.5 * (p[:, a] + p[:, b]) - bary) for a, b in LOCAL_EDGES]
        flags = np.stack([np.asarray(classifier(s), dtype=bool) for s in samples], axis=1)
        straddle = flags.any(axis=1) & ~flags.all(axis=1)
        if straddle.any():
            raise MeshError(
                f"grid with n={n} does not resolve the region interface "
                f"({int(straddle.sum())} tets straddle it)"
            )
        region = np.where(flags[:, 0], MOLECULAR, SOLVENT).astype(np.int8)

    face_tags = np.zeros((nt, 4), dtype=np.int8)
    for i in range(4):
        fp = coords[tets[:, FACE_OPPOSITE[i]]]  # (nt, 3, 3)
        on = np.zeros(nt, dtype=bool)
        for d in range(3):
            c = fp[:, :, d]
            on |= np.all(c == lo[d], axis=1) | np.all(c == hi[d], axis=1)
        face_tags[on, i] = boundary_tag
    return Mesh(
        coords=coords,
        tets=tets,
        region=region,
        face_tags=face_tags,
        generation=np.zeros(nt, dtype=np.int32),
        vertex_parents=np.full((coords.shape[0], 2), -1, dtype=np.int64),
        box=box,
    )


def bisect(mesh: Mesh, marked, max_bisections: int | None = None, kernel=None) -> Mesh:
    """Longest-edge bisection of ``marked`` tets plus conformity closure.

    Every marked tet is bisected at least once through the midpoint of its
    longest edge (ties: smallest ``(min id, max id)`` pair); tets with a
    hanging vertex are bisected until none remain.

    Raises
    ------
    ClosureError
        If more than ``max_bisections`` (default ``100 * len(marked)``)
        bisections are needed.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64).ravel())
    if marked.size == 0:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_tets:
        raise IndexError("marked tet id out of range")
    if max_bisections is None:
        max_bisections = 100 * marked.size
    kernel = kernel or _kernels.bisect_kernel
    coords, tets, region, generation, face_tags, parents, ancestor, _ = kernel(
        np.ascontiguousarray(mesh.coords, dtype=np.float64),
        np.ascontiguousarray(mesh.tets, dtype=np.int64),
        np.ascontiguousarray(mesh.region, dtype=np.int8),
        np.ascontiguousarray(mesh.generation, dtype=np.int32),
        np.ascontiguousarray(mesh.face_tags, dtype=np.int8),
        marked.tolist(),
        int(max_bisections),
    )
    child = Mesh(
        coords=coords,
        tets=tets,
        region=region,
        face_tags=face_tags,
        generation=generation,
        vertex_parents=np.concatenate([mesh.vertex_parents, parents]),
        box=mesh.box,
        generation_id=mesh.generation_id + 1,
        tet_ancestor=ancestor,
    )
    object.__setattr__(child, "lineage", mesh.lineage + (child.uid,))
    return child


def uniform_refine(mesh: Mesh, rounds: int = 1) -> Mesh:
    for _ in range(rounds):
        mesh = bisect(mesh, np.arange(mesh.n_tets))
    return mesh


def check_conformity(mesh: Mesh) -> tuple[bool, list[str]]:
    """Return ``(ok, violations)``.

    Checked: every face is shared by one or two tets; single-neighbor faces
    are exactly the tagged boundary faces; no vertex hangs on a tet edge;
    all tets are positively oriented.
    """
    violations = []
    ft = mesh.faces
    for f in np.flatnonzero(ft.counts > 2):
        violations.append(
            f"face {tuple(ft.vertices[f])} shared by {int(ft.counts[f])} tets"
        )
    tagged = mesh.face_tags[ft.face_tets[:, 0], ft.face_local[:, 0]] != UNTAGGED
    for f in np.flatnonzero((ft.counts == 1) & ~tagged):
        violations.append(f"face {tuple(ft.vertices[f])} has one tet but is not on the boundary")
    for f in np.flatnonzero((ft.counts == 2) & tagged):
        violations.append(f"interior face {tuple(ft.vertices[f])} carries a boundary tag")

    created = mesh.vertex_parents[:, 0] >= 0
    if created.any():
        par = np.sort(mesh.vertex_parents[created], axis=1)
        a = mesh.tets[:, LOCAL_EDGES[:, 0]].ravel()
        b = mesh.tets[:, LOCAL_EDGES[:, 1]].ravel()
        edges = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
        pk = par[:, 0] * mesh.n_vertices + par[:, 1]
        ek = edges[:, 0] * mesh.n_vertices + edges[:, 1]
        hit = np.isin(ek, pk)
        for e in np.unique(ek[hit])[:20]:
            violations.append(
                f"hanging vertex on edge ({e // mesh.n_vertices}, {e % mesh.n_vertices})"
            )
    vol = mesh.volumes
    for t in np.flatnonzero(vol <= 0)[:20]:
        violations.append(f"tet {t} has nonpositive volume")
    return not violations, violations


def shape_quality(mesh: Mesh) -> tuple[float, float]:
    """Minimum dihedral angle (degrees) and maximum aspect ratio.

    The aspect ratio is ``h_max / (2 * sqrt(6) * r_in)``, equal to 1 for a
    regular tetrahedron.
    """
    grads, vol = mesh.geometry
    unit = grads / np.linalg.norm(grads, axis=2, keepdims=True)
    i, j = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
    cosang = -(unit[:, i] * unit[:, j]).sum(axis=2)
    dihedral = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    # height over face i is 1/|grad lambda_i|, so area_i = 3 V |grad lambda_i|
    areas = 3.0 * vol[:, None] * np.linalg.norm(grads, axis=2)
    r_in = 3.0 * vol / areas.sum(axis=1)
    aspect = mesh.diameters / (2.0 * np.sqrt(6.0) * r_in)
    return float(dihedral.min()), float(aspect.max())


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format."""
    tri, tags = mesh.boundary_faces
    flag = mesh.boundary_flag.astype(int)
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        for (x, y, z), b in zip(mesh.coords, flag):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g} {b}\n")
        fh.write(f"tets {mesh.n_tets}\n")
        for t, r, g in zip(mesh.tets, mesh.region, mesh.generation):
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]} {r} {g}\n")
        fh.write(f"boundary_faces {tri.shape[0]}\n")
        for f, tag in zip(tri, tags):
            fh.write(f"{f[0]} {f[1]} {f[2]} {tag}\n")


def read_mesh(path) -> Mesh:
    """Read the plain-text mesh format written by :func:`write_mesh`.

    Genealogy is not part of the format; the result is a fresh level-0 mesh.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    pos = 0

    def header(name):
        nonlocal pos
        word, count = tokens[pos].split()
        if word != name:
            raise MeshError(f"expected '{name}' section, got '{word}'")
        pos += 1
        block = np.loadtxt(tokens[pos : pos + int(count)], ndmin=2) if int(count) else None
        pos += int(count)
        return int(count), block

    nv, vb = header("vertices")
    nt, tb = header("tets")
    nf, fb = header("boundary_faces")
    coords = vb[:, :3].copy()
    tets = tb[:, :4].astype(np.int64)
    face_tags = np.zeros((nt, 4), dtype=np.int8)
    if nf:
        lookup = {tuple(sorted(f[:3].astype(int))): int(f[3]) for f in fb}
        for i in range(4):
            tri = np.sort(tets[:, FACE_OPPOSITE[i]], axis=1)
            for t in range(nt):
                face_tags[t, i] = lookup.get(tuple(tri[t]), UNTAGGED)
    return Mesh(
        coords=coords,
        tets=tets,
        region=tb[:, 4].astype(np.int8),
        face_tags=face_tags,
        generation=tb[:, 5].astype(np.int32),
        vertex_parents=np.full((nv, 2), -1, dtype=np.int64),
        box=np.stack([coords.min(axis=0), coords.max(axis=0)]),
    )
