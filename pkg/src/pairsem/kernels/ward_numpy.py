"""Nearest-neighbor-chain Ward linkage, pure numpy backend.

Same algorithm and float-operation order as the numba kernel; results are
bit-identical. The inner nearest-neighbor scan and the Lance-Williams row
update are vectorized, the chain logic stays in Python.
"""
from __future__ import annotations

import numpy as np


def nn_chain_ward(d2: np.ndarray) -> np.ndarray:
    n = d2.shape[0]
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    slot_id = np.arange(n, dtype=np.int64)
    chain: list[int] = []
    next_id = n
    out = np.zeros((n - 1, 4), dtype=np.float64)
    masked = np.empty(n, dtype=np.float64)

    for merge in range(n - 1):
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        while True:
            x = chain[-1]
            if len(chain) > 1:
                y = chain[-2]
                best = d2[x, y]
            else:
                y = -1
                best = np.inf
            np.copyto(masked, d2[x])
            masked[~active] = np.inf
            masked[x] = np.inf
            i = int(np.argmin(masked))
            if masked[i] < best:
                y = i
            if len(chain) > 1 and y == chain[-2]:
                chain.pop()
                chain.pop()
                break
            chain.append(int(y))

        lo, hi = (x, y) if x < y else (y, x)
        dab = d2[lo, hi]
        sa = size[lo]
        sb = size[hi]
        id_lo, id_hi = slot_id[lo], slot_id[hi]
        out[merge, 0] = min(id_lo, id_hi)
        out[merge, 1] = max(id_lo, id_hi)
        out[merge, 2] = np.sqrt(dab)
        out[merge, 3] = sa + sb

        upd = active.copy()
        upd[lo] = False
        upd[hi] = False
        sk = size[upd]
        st = sa + sb + sk
        vals = ((sa + sk) * d2[lo, upd] + (sb + sk) * d2[hi, upd] - sk * dab) / st
        d2[lo, upd] = vals
        d2[upd, lo] = vals

        active[hi] = False
        size[lo] = sa + sb
        slot_id[lo] = next_id
        next_id += 1
    return out
