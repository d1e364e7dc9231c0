"""Nearest-neighbor-chain Ward linkage, numba backend."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def nn_chain_ward(d2: np.ndarray) -> np.ndarray:  # pragma: no cover - jitted
    """Full Ward merge tree from a squared-distance matrix (diag = +inf).

    Returns an (n-1, 4) linkage: [id_a, id_b, sqrt(merge_d2), size] with new
    clusters numbered n, n+1, ... The matrix is mutated in place. Ties are
    broken toward the previous chain element, then the smallest slot index;
    merged clusters live at the smaller slot, so with lexicographically
    sorted inputs ties resolve toward the smallest member.
    """
    n = d2.shape[0]
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=np.bool_)
    slot_id = np.arange(n, dtype=np.int64)
    chain = np.empty(n, dtype=np.int64)
    chain_len = 0
    next_id = n
    out = np.zeros((n - 1, 4), dtype=np.float64)

    for merge in range(n - 1):
        if chain_len == 0:
            for i in range(n):
                if active[i]:
                    chain[0] = i
                    chain_len = 1
                    break
        while True:
            x = chain[chain_len - 1]
            if chain_len > 1:
                y = chain[chain_len - 2]
                best = d2[x, y]
            else:
                y = -1
                best = np.inf
            for i in range(n):
                if not active[i] or i == x:
                    continue
                if d2[x, i] < best:
                    best = d2[x, i]
                    y = i
            if chain_len > 1 and y == chain[chain_len - 2]:
                chain_len -= 2
                break
            chain[chain_len] = y
            chain_len += 1

        lo = x if x < y else y
        hi = y if x < y else x
        dab = d2[lo, hi]
        sa = size[lo]
        sb = size[hi]
        id_lo = slot_id[lo]
        id_hi = slot_id[hi]
        out[merge, 0] = id_lo if id_lo < id_hi else id_hi
        out[merge, 1] = id_hi if id_lo < id_hi else id_lo
        out[merge, 2] = np.sqrt(dab)
        out[merge, 3] = sa + sb

        for k in range(n):
            if not active[k] or k == lo or k == hi:
                continue
            sk = size[k]
            st = sa + sb + sk
            val = ((sa + sk) * d2[lo, k] + (sb + sk) * d2[hi, k] - sk * dab) / st
            d2[lo, k] = val
            d2[k, lo] = val

        active[hi] = False
        size[lo] = sa + sb
        slot_id[lo] = next_id
        next_id += 1
    return out
