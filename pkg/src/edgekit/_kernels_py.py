"""Pure-Python/numpy reference versions of the compiled kernels in ``_ckernels.pyx``."""

from __future__ import annotations

import numpy as np


def find_cycle(heads: np.ndarray) -> list[int] | None:
    """First cycle (in order of discovery from the lowest node) in a head array, or None."""
    n = len(heads)
    state = np.zeros(n, dtype=np.int8)  # 0 unseen, 1 on current path, 2 done
    for start in range(1, n):
        if state[start]:
            continue
        path = []
        v = start
        while v > 0 and state[v] == 0:
            state[v] = 1
            path.append(v)
            v = int(heads[v])
        if v > 0 and state[v] == 1:
            return path[path.index(v):]
        for u in path:
            state[u] = 2
    return None


def _greedy(S: np.ndarray) -> np.ndarray:
    n = S.shape[0]
    heads = np.full(n, -1, dtype=np.int64)
    for dep in range(1, n):
        row = S[dep].copy()
        row[dep] = -np.inf
        heads[dep] = int(np.argmax(row))
    return heads


def _cle(S: np.ndarray) -> np.ndarray:
    heads = _greedy(S)
    cycle = find_cycle(heads)
    if cycle is None:
        return heads
    n = S.shape[0]
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    cyc = np.asarray(cycle, dtype=np.int64)
    keep = np.flatnonzero(~in_cycle)
    m = len(keep) + 1
    c = m - 1
    new = np.full((m, m), -np.inf)
    new[:c, :c] = S[np.ix_(keep, keep)]
    # cycle node as head of an outside dependent
    out_block = S[np.ix_(keep, cyc)]
    exit_arg = np.argmax(out_block, axis=1)
    new[:c, c] = out_block[np.arange(c), exit_arg]
    # outside head entering the cycle, breaking the cycle edge into that node
    cyc_scores = S[cyc, heads[cyc]]
    in_block = S[np.ix_(cyc, keep)] - cyc_scores[:, None]
    enter_arg = np.argmax(in_block, axis=0)
    new[c, :c] = in_block[enter_arg, np.arange(c)]
    new[0, :] = -np.inf
    sub = _cle(new)

    result = heads.copy()
    for a in range(1, c):
        h = sub[a]
        result[keep[a]] = cyc[exit_arg[a]] if h == c else keep[h]
    b = sub[c]
    result[cyc[enter_arg[b]]] = keep[b]
    return result


def cle_decode(scores: np.ndarray) -> np.ndarray:
    """Maximum spanning arborescence rooted at 0 over ``scores[dep, head]``.

    Returns heads with ``heads[0] == -1``. ``-inf`` cells are absent edges.
    """
    S = np.array(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    return _cle(S)


def topk_indices(sims: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the ``k`` largest values ordered by (value desc, index asc)."""
    sims = np.asarray(sims, dtype=np.float64)
    q, E = sims.shape
    k = min(k, E)
    out = np.empty((q, k), dtype=np.int64)
    if k == 0:
        return out
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    kth = sims[np.arange(q)[:, None], part].min(axis=1)
    for r in range(q):
        row = sims[r]
        above = np.flatnonzero(row > kth[r])
        ties = np.flatnonzero(row == kth[r])[: k - len(above)]
        sel = np.concatenate([above, ties])
        out[r] = sel[np.lexsort((sel, -row[sel]))]
    return out
