"""Batched BM25 scoring, pure numpy backend.

Vectorized over the flat entity-token list per document row; per-entity
sums run in the same order as the numba kernel's inner loop, so outputs
are bit-identical.
"""
from __future__ import annotations

import numpy as np


def bm25_score_rows(
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
    m = doc_rows.shape[0]
    n_ent = ent_indptr.shape[0] - 1
    scores = np.zeros((m, n_ent), dtype=np.float64)
    if ent_token_ids.shape[0] == 0:
        return scores

    # segment id of every flat token position
    seg = np.repeat(np.arange(n_ent), np.diff(ent_indptr))
    known = ent_token_ids >= 0
    tok = np.where(known, ent_token_ids, 0)

    for r in range(m):
        d = doc_rows[r]
        lo, hi = doc_indptr[d], doc_indptr[d + 1]
        terms = doc_term_ids[lo:hi]
        norm = k1 * (1.0 - b + b * doc_len[d] / avgdl)
        if hi == lo:
            continue
        pos = np.searchsorted(terms, tok)
        pos_clip = np.minimum(pos, hi - lo - 1)
        found = known & (terms[pos_clip] == tok)
        contrib = np.zeros(tok.shape[0], dtype=np.float64)
        idx = np.flatnonzero(found)
        tf = doc_tf[lo + pos_clip[idx]]
        contrib[idx] = idf[tok[idx]] * (tf * (k1 + 1.0)) / (tf + norm)
        scores[r] = np.bincount(seg, weights=contrib, minlength=n_ent)
    return scores
