"""Backend dispatch for the numeric hot loops.

Two kernel families have a numba ``@njit`` implementation and a pure-numpy
fallback that computes bit-identical results:

* ``nn_chain_ward``   - nearest-neighbor-chain Ward linkage over a squared
  Euclidean distance matrix (agglomerative clustering of vocab surfaces).
* ``bm25_score_rows`` - batched BM25 of every entity against selected
  document rows (distinctiveness / soft-label construction).

Set ``PAIRSEM_NUMBA=0`` to force the numpy path; by default numba is used
when it imports. ``benchmarks/bench_kernels.py`` compares the two.
"""
from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

_FALSY = ("0", "false", "no", "off")


def _pick_backend() -> str:
    flag = os.environ.get("PAIRSEM_NUMBA", "").strip().lower()
    if flag in _FALSY:
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        logger.warning("numba unavailable; falling back to numpy kernels")
        return "numpy"
    return "numba"


BACKEND = _pick_backend()

if BACKEND == "numba":
    from .ward_numba import nn_chain_ward
    from .bm25_numba import bm25_score_rows
else:
    from .ward_numpy import nn_chain_ward
    from .bm25_numpy import bm25_score_rows

__all__ = ["BACKEND", "nn_chain_ward", "bm25_score_rows", "squared_distances"]


def squared_distances(points):
    """Dense squared Euclidean distance matrix with +inf on the diagonal."""
    import numpy as np

    x = np.ascontiguousarray(points, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    return d2
