"""Pure-Python longest-edge bisection kernel.

Reference implementation of the closure loop; the compiled extension
``_bisect_ext`` implements the identical algorithm and must produce
bit-identical output.
"""
from collections import deque

import numpy as np

LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class ClosureError(RuntimeError):
    """Raised when conformity closure exceeds its bisection budget."""


def _longest_edge(tet, coords):
    best = -1.0
    best_pair = None
    best_local = None
    for i, j in LOCAL_EDGES:
        a, b = tet[i], tet[j]
        pa, pb = coords[a], coords[b]
        dx = pa[0] - pb[0]
        dy = pa[1] - pb[1]
        dz = pa[2] - pb[2]
        len2 = dx * dx + dy * dy + dz * dz
        pair = (a, b) if a < b else (b, a)
        if len2 > best or (len2 == best and pair < best_pair):
            best = len2
            best_pair = pair
            best_local = (i, j)
    return best_local


def bisect_kernel(coords, tets, region, generation, face_tags, marked, max_bisections):
    """Bisect ``marked`` tets and close the mesh by further bisections.

    Returns ``(coords, tets, region, generation, face_tags, new_parents,
    ancestor, n_bisections)`` where ``new_parents`` has one row per created
    vertex (in creation order) and ``ancestor`` maps every output tet to the
    input tet it descends from.
    """
    nv0 = coords.shape[0]
    pts = [tuple(p) for p in coords.tolist()]
    T = [list(t) for t in tets.tolist()]
    reg = region.tolist()
    gen = generation.tolist()
    tags = [list(f) for f in face_tags.tolist()]
    anc = list(range(len(T)))
    parents = []

    edge_tets = {}
    for s, t in enumerate(T):
        for i, j in LOCAL_EDGES:
            a, b = t[i], t[j]
            key = (a, b) if a < b else (b, a)
            edge_tets.setdefault(key, []).append(s)

    midpoint = {}
    must = {int(s) for s in marked}
    queue = deque(sorted(must))
    count = 0

    def hanging(t):
        for i, j in LOCAL_EDGES:
            a, b = t[i], t[j]
            if ((a, b) if a < b else (b, a)) in midpoint:
                return True
        return False

    def register(s, t):
        for i, j in LOCAL_EDGES:
            a, b = t[i], t[j]
            key = (a, b) if a < b else (b, a)
            edge_tets.setdefault(key, []).append(s)

    while queue:
        s = queue.popleft()
        t = T[s]
        if s in must:
            must.discard(s)
        elif not hanging(t):
            continue
        count += 1
        if count > max_bisections:
            raise ClosureError(
                f"conformity closure exceeded {max_bisections} bisections"
            )
        i, j = _longest_edge(t, pts)
        a, b = t[i], t[j]
        key = (a, b) if a < b else (b, a)
        m = midpoint.get(key)
        if m is None:
            m = len(pts)
            pa, pb = pts[a], pts[b]
            pts.append(
                (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]), 0.5 * (pa[2] + pb[2]))
            )
            parents.append(key)
            midpoint[key] = m
            for other in edge_tets[key]:
                if other != s and a in T[other] and b in T[other]:
                    queue.append(other)
        c1 = list(t)
        c1[j] = m
        c2 = list(t)
        c2[i] = m
        tag1 = list(tags[s])
        tag1[i] = 0
        tag2 = list(tags[s])
        tag2[j] = 0
        s2 = len(T)
        T[s] = c1
        tags[s] = tag1
        gen[s] += 1
        T.append(c2)
        tags.append(tag2)
        reg.append(reg[s])
        gen.append(gen[s])
        anc.append(anc[s])
        register(s, c1)
        register(s2, c2)
        queue.append(s)
        queue.append(s2)

    coords_out = np.array(pts, dtype=np.float64).reshape(-1, 3)
    parents_out = np.array(parents, dtype=np.int64).reshape(-1, 2)
    assert coords_out.shape[0] == nv0 + parents_out.shape[0]
    return (
        coords_out,
        np.array(T, dtype=np.int64).reshape(-1, 4),
        np.array(reg, dtype=np.int8),
        np.array(gen, dtype=np.int32),
        np.array(tags, dtype=np.int8).reshape(-1, 4),
        parents_out,
        np.array(anc, dtype=np.int64),
        count,
    )
