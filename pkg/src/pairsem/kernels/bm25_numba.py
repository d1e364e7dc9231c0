"""Batched BM25 scoring, numba backend."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def bm25_score_rows(  # pragma: no cover - jitted
    doc_rows: np.ndarray,
    doc_indptr: np.ndarray,
    doc_term_ids: np.ndarray,
    doc_tf: np.ndarray,
    doc_len: np.ndarray,
    avgdl: float,
    idf: np.ndarray,
    ent_indptr: np.ndarray,
    ent_token_ids: np.ndarray,
    k1: float,
    b: float,
) -> np.ndarray:
    """BM25(d, e) for every (doc row, entity).

    Documents are CSR rows of (term id, tf) sorted by term id; entities are
    flat token-id lists (-1 marks a token outside the vocabulary, scoring 0).
    """
    m = doc_rows.shape[0]
    n_ent = ent_indptr.shape[0] - 1
    scores = np.zeros((m, n_ent), dtype=np.float64)
    for r in range(m):
        d = doc_rows[r]
        lo = doc_indptr[d]
        hi = doc_indptr[d + 1]
        norm = k1 * (1.0 - b + b * doc_len[d] / avgdl)
        for j in range(n_ent):
            acc = 0.0
            for p in range(ent_indptr[j], ent_indptr[j + 1]):
                t = ent_token_ids[p]
                if t < 0:
                    continue
                pos = np.searchsorted(doc_term_ids[lo:hi], t)
                if pos < hi - lo and doc_term_ids[lo + pos] == t:
                    tf = doc_tf[lo + pos]
                    acc += idf[t] * (tf * (k1 + 1.0)) / (tf + norm)
            scores[r, j] = acc
    return scores
