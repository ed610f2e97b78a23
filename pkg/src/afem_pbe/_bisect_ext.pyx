# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled longest-edge bisection kernel (same algorithm as ``_bisect_py``)."""
import numpy as np

cimport numpy as cnp
from libc.stdint cimport int8_t, int32_t, int64_t, uint64_t
from libcpp.deque cimport deque
from libcpp.unordered_map cimport unordered_map
from libcpp.unordered_set cimport unordered_set
from libcpp.vector cimport vector
from cython.operator cimport dereference as deref

from ._bisect_py import ClosureError

cnp.import_array()

cdef int EA[6]
cdef int EB[6]
EA[:] = [0, 0, 0, 1, 1, 2]
EB[:] = [1, 2, 3, 2, 3, 3]


cdef inline uint64_t ekey(int64_t a, int64_t b) noexcept nogil:
    if a > b:
        a, b = b, a
    return (<uint64_t>a << 32) | <uint64_t>b


cdef inline int64_t key_lo(uint64_t k) noexcept nogil:
    return <int64_t>(k >> 32)


cdef inline int64_t key_hi(uint64_t k) noexcept nogil:
    return <int64_t>(k & 0xFFFFFFFFu)


cdef struct Work:
    vector[double] pts
    vector[int64_t] tets
    vector[int8_t] tags


cdef inline int longest_edge(Work* w, int64_t s) noexcept nogil:
    cdef int e, best_e = -1
    cdef double best = -1.0, dx, dy, dz, len2
    cdef int64_t a, b, lo, hi, blo = 0, bhi = 0
    for e in range(6):
        a = w.tets[4 * s + EA[e]]
        b = w.tets[4 * s + EB[e]]
        dx = w.pts[3 * a] - w.pts[3 * b]
        dy = w.pts[3 * a + 1] - w.pts[3 * b + 1]
        dz = w.pts[3 * a + 2] - w.pts[3 * b + 2]
        len2 = dx * dx + dy * dy + dz * dz
        lo = a if a < b else b
        hi = b if a < b else a
        if len2 > best or (len2 == best and (lo < blo or (lo == blo and hi < bhi))):
            best = len2
            blo = lo
            bhi = hi
            best_e = e
    return best_e


cdef inline bint contains(Work* w, int64_t s, int64_t v) noexcept nogil:
    return (w.tets[4 * s] == v or w.tets[4 * s + 1] == v
            or w.tets[4 * s + 2] == v or w.tets[4 * s + 3] == v)


def bisect_kernel(double[:, ::1] coords, int64_t[:, ::1] tets, int8_t[::1] region,
                  int32_t[::1] generation, int8_t[:, ::1] face_tags, marked,
                  int64_t max_bisections):
    cdef Py_ssize_t nv0 = coords.shape[0], nt0 = tets.shape[0], k
    cdef Work w
    cdef vector[int8_t] reg
    cdef vector[int32_t] gen
    cdef vector[int64_t] anc
    cdef vector[int64_t] parents
    cdef unordered_map[uint64_t, vector[int64_t]] edge_tets
    cdef unordered_map[uint64_t, int64_t] midpoint
    cdef unordered_map[uint64_t, int64_t].iterator mit
    cdef unordered_set[int64_t] must
    cdef deque[int64_t] queue
    cdef int64_t s, s2, a, b, m, other, count = 0
    cdef int e, i, j, q
    cdef uint64_t key
    cdef bint hang
    cdef vector[int64_t]* lst

    w.pts.resize(3 * nv0)
    for k in range(nv0):
        w.pts[3 * k] = coords[k, 0]
        w.pts[3 * k + 1] = coords[k, 1]
        w.pts[3 * k + 2] = coords[k, 2]
    w.tets.resize(4 * nt0)
    w.tags.resize(4 * nt0)
    reg.resize(nt0)
    gen.resize(nt0)
    anc.resize(nt0)
    edge_tets.reserve(<size_t>(1.3 * nt0) + 16)
    for k in range(nt0):
        for q in range(4):
            w.tets[4 * k + q] = tets[k, q]
            w.tags[4 * k + q] = face_tags[k, q]
        reg[k] = region[k]
        gen[k] = generation[k]
        anc[k] = k
        for e in range(6):
            edge_tets[ekey(tets[k, EA[e]], tets[k, EB[e]])].push_back(k)

    for s in sorted({int(x) for x in marked}):
        must.insert(s)
        queue.push_back(s)

    while not queue.empty():
        s = queue.front()
        queue.pop_front()
        if must.count(s):
            must.erase(s)
        else:
            hang = False
            for e in range(6):
                if midpoint.count(ekey(w.tets[4 * s + EA[e]], w.tets[4 * s + EB[e]])):
                    hang = True
                    break
            if not hang:
                continue
        count += 1
        if count > max_bisections:
            raise ClosureError(
                f"conformity closure exceeded {max_bisections} bisections"
            )
        e = longest_edge(&w, s)
        i = EA[e]
        j = EB[e]
        a = w.tets[4 * s + i]
        b = w.tets[4 * s + j]
        key = ekey(a, b)
        mit = midpoint.find(key)
        if mit == midpoint.end():
            m = <int64_t>(w.pts.size() // 3)
            w.pts.push_back(0.5 * (w.pts[3 * a] + w.pts[3 * b]))
            w.pts.push_back(0.5 * (w.pts[3 * a + 1] + w.pts[3 * b + 1]))
            w.pts.push_back(0.5 * (w.pts[3 * a + 2] + w.pts[3 * b + 2]))
            parents.push_back(key_lo(key))
            parents.push_back(key_hi(key))
            midpoint[key] = m
            lst = &edge_tets[key]
            for k in range(<Py_ssize_t>lst.size()):
                other = lst[0][k]
                if other != s and contains(&w, other, a) and contains(&w, other, b):
                    queue.push_back(other)
        else:
            m = deref(mit).second

        s2 = <int64_t>(w.tets.size() // 4)
        for q in range(4):
            w.tets.push_back(w.tets[4 * s + q])
            w.tags.push_back(w.tags[4 * s + q])
        w.tets[4 * s + j] = m
        w.tags[4 * s + i] = 0
        w.tets[4 * s2 + i] = m
        w.tags[4 * s2 + j] = 0
        gen[s] += 1
        reg.push_back(reg[s])
        gen.push_back(gen[s])
        anc.push_back(anc[s])
        for e in range(6):
            edge_tets[ekey(w.tets[4 * s + EA[e]], w.tets[4 * s + EB[e]])].push_back(s)
        for e in range(6):
            edge_tets[ekey(w.tets[4 * s2 + EA[e]], w.tets[4 * s2 + EB[e]])].push_back(s2)
        queue.push_back(s)
        queue.push_back(s2)

    cdef Py_ssize_t nv = w.pts.size() // 3, nt = w.tets.size() // 4
    coords_out = np.empty((nv, 3), dtype=np.float64)
    tets_out = np.empty((nt, 4), dtype=np.int64)
    tags_out = np.empty((nt, 4), dtype=np.int8)
    reg_out = np.empty(nt, dtype=np.int8)
    gen_out = np.empty(nt, dtype=np.int32)
    anc_out = np.empty(nt, dtype=np.int64)
    parents_out = np.empty((nv - nv0, 2), dtype=np.int64)
    cdef double[:, ::1] cv = coords_out
    cdef int64_t[:, ::1] tv = tets_out
    cdef int8_t[:, ::1] fv = tags_out
    cdef int8_t[::1] rv = reg_out
    cdef int32_t[::1] gv = gen_out
    cdef int64_t[::1] av = anc_out
    cdef int64_t[:, ::1] pv = parents_out
    for k in range(nv):
        cv[k, 0] = w.pts[3 * k]
        cv[k, 1] = w.pts[3 * k + 1]
        cv[k, 2] = w.pts[3 * k + 2]
    for k in range(nt):
        for q in range(4):
            tv[k, q] = w.tets[4 * k + q]
            fv[k, q] = w.tags[4 * k + q]
        rv[k] = reg[k]
        gv[k] = gen[k]
        av[k] = anc[k]
    for k in range(nv - nv0):
        pv[k, 0] = parents[2 * k]
        pv[k, 1] = parents[2 * k + 1]
    return coords_out, tets_out, reg_out, gen_out, tags_out, parents_out, anc_out, count
