# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Chu-Liu-Edmonds decoding and exact top-k selection.

Same contracts as ``_kernels_py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef void _greedy(double[:, ::1] S, cnp.int64_t[::1] heads) noexcept nogil:
    cdef Py_ssize_t n = S.shape[0], dep, j, best
    cdef double v, bv
    heads[0] = -1
    for dep in range(1, n):
        best = -1
        bv = -INFINITY
        for j in range(n):
            if j == dep:
                continue
            v = S[dep, j]
            if best < 0 or v > bv:
                bv = v
                best = j
        heads[dep] = best


cdef Py_ssize_t _find_cycle(cnp.int64_t[::1] heads, signed char[::1] state, cnp.int64_t[::1] path,
                            cnp.int64_t[::1] cycle) noexcept nogil:
    """Writes the first cycle into ``cycle`` and returns its length (0 if acyclic)."""
    cdef Py_ssize_t n = heads.shape[0], start, v, plen, i, k
    for i in range(n):
        state[i] = 0
    for start in range(1, n):
        if state[start]:
            continue
        plen = 0
        v = start
        while v > 0 and state[v] == 0:
            state[v] = 1
            path[plen] = v
            plen += 1
            v = heads[v]
        if v > 0 and state[v] == 1:
            k = 0
            i = 0
            while path[i] != v:
                i += 1
            while i < plen:
                cycle[k] = path[i]
                k += 1
                i += 1
            return k
        for i in range(plen):
            state[path[i]] = 2
    return 0


cdef cnp.ndarray _cle(cnp.ndarray[cnp.float64_t, ndim=2] S_arr):
    cdef double[:, ::1] S = S_arr
    cdef Py_ssize_t n = S.shape[0]
    heads_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] heads = heads_arr
    _greedy(S, heads)
    state_arr = np.zeros(n, dtype=np.int8)
    path_arr = np.empty(n, dtype=np.int64)
    cyc_arr = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t clen = _find_cycle(heads, state_arr, path_arr, cyc_arr)
    if clen == 0:
        return heads_arr
    cdef cnp.int64_t[::1] cyc = cyc_arr
    in_cycle_arr = np.zeros(n, dtype=np.int8)
    cdef signed char[::1] in_cycle = in_cycle_arr
    cdef Py_ssize_t i, a, b, x, m, c, best
    cdef double v, bv
    for i in range(clen):
        in_cycle[cyc[i]] = 1
    keep_arr = np.empty(n - clen, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    a = 0
    for i in range(n):
        if not in_cycle[i]:
            keep[a] = i
            a += 1
    m = n - clen + 1
    c = m - 1
    new_arr = np.full((m, m), -np.inf)
    cdef double[:, ::1] new = new_arr
    exit_arr = np.empty(c, dtype=np.int64)
    enter_arr = np.empty(c, dtype=np.int64)
    cdef cnp.int64_t[::1] exit_arg = exit_arr
    cdef cnp.int64_t[::1] enter_arg = enter_arr
    for a in range(c):
        for b in range(c):
            new[a, b] = S[keep[a], keep[b]]
        best = 0
        bv = S[keep[a], cyc[0]]
        for x in range(1, clen):
            v = S[keep[a], cyc[x]]
            if v > bv:
                bv = v
                best = x
        new[a, c] = bv
        exit_arg[a] = best
    for b in range(c):
        best = 0
        bv = S[cyc[0], keep[b]] - S[cyc[0], heads[cyc[0]]]
        for x in range(1, clen):
            v = S[cyc[x], keep[b]] - S[cyc[x], heads[cyc[x]]]
            if v > bv:
                bv = v
                best = x
        new[c, b] = bv
        enter_arg[b] = best
    for b in range(m):
        new[0, b] = -INFINITY
    cdef cnp.int64_t[::1] sub = _cle(new_arr)
    result_arr = heads_arr.copy()
    cdef cnp.int64_t[::1] result = result_arr
    for a in range(1, c):
        if sub[a] == c:
            result[keep[a]] = cyc[exit_arg[a]]
        else:
            result[keep[a]] = keep[sub[a]]
    b = sub[c]
    result[cyc[enter_arg[b]]] = keep[b]
    return result_arr


def cle_decode(scores):
    S = np.array(scores, dtype=np.float64, order="C")
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    return _cle(S)


def topk_indices(sims, Py_ssize_t k):
    cdef double[:, ::1] S = np.ascontiguousarray(sims, dtype=np.float64)
    cdef Py_ssize_t q = S.shape[0], E = S.shape[1], r, j, cnt, pos
    if k > E:
        k = E
    out_arr = np.empty((q, k), dtype=np.int64)
    if k == 0:
        return out_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    vals_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] vals = vals_arr
    cdef double v
    with nogil:
        for r in range(q):
            cnt = 0
            for j in range(E):
                v = S[r, j]
                if cnt == k and not (v > vals[k - 1]):
                    continue
                pos = cnt if cnt < k else k - 1
                # shift strictly smaller values down; equal values keep their earlier slot
                while pos > 0 and vals[pos - 1] < v:
                    if pos < k:
                        vals[pos] = vals[pos - 1]
                        out[r, pos] = out[r, pos - 1]
                    pos -= 1
                vals[pos] = v
                out[r, pos] = j
                if cnt < k:
                    cnt += 1
    return out_arr
