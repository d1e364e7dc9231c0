"""BM25 scoring, distinctiveness, and soft-label construction.

Okapi BM25 with k1=1.2, b=0.75 and IDF(t) = ln(1 + (N - df + 0.5)/(df + 0.5)).
Distinctiveness of an entity for a document divides its exponentiated BM25
score by one plus the exponentiated scores over the document's nearest
neighbors; the ratio is evaluated with the max exponent subtracted so large
scores cannot overflow.

Soft labels normalize distinctiveness by the per-document maximum over the
full entity set. That maximum is found lazily: only entities sharing at
least one token with the document or its neighbors can differ from the
closed-form value 1/(1 + |neighbors|) shared by all zero-overlap entities.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import kernels
from .candidates import NeighborIndex
from .model import Document

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Bm25Index:
    """CSR-backed term statistics over a document corpus."""

    def __init__(self, docs: list[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self._row: dict[str, int] = {}
        term_ids: dict[str, int] = {}
        indptr = [0]
        flat_terms: list[int] = []
        flat_tf: list[float] = []
        lengths: list[float] = []
        df_count: dict[int, int] = {}
        for i, doc in enumerate(docs):
            if doc.doc_id in self._row:
                raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
            self._row[doc.doc_id] = i
            tokens = tokenize(doc.text)
            lengths.append(float(len(tokens)))
            counts: dict[int, int] = {}
            for tok in tokens:
                tid = term_ids.setdefault(tok, len(term_ids))
                counts[tid] = counts.get(tid, 0) + 1
            for tid in sorted(counts):
                flat_terms.append(tid)
                flat_tf.append(float(counts[tid]))
                df_count[tid] = df_count.get(tid, 0) + 1
            indptr.append(len(flat_terms))
        self._term_ids = term_ids
        self._indptr = np.asarray(indptr, dtype=np.int64)
        self._terms = np.asarray(flat_terms, dtype=np.int64)
        self._tf = np.asarray(flat_tf, dtype=np.float64)
        self._len = np.asarray(lengths, dtype=np.float64)
        self.n_docs = len(docs)
        total = float(self._len.sum())
        self.avgdl = total / self.n_docs if total > 0 else 1.0
        self._idf = np.zeros(len(term_ids), dtype=np.float64)
        for tid, df in df_count.items():
            self._idf[tid] = math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def row(self, doc_id: str) -> int:
        return self._row[doc_id]

    def idf(self, token: str) -> float:
        tid = self._term_ids.get(token)
        return float(self._idf[tid]) if tid is not None else 0.0

    def token_ids(self, text: str) -> np.ndarray:
        """Token ids of a query string; -1 marks out-of-vocabulary tokens."""
        return np.asarray(
            [self._term_ids.get(t, -1) for t in tokenize(text)], dtype=np.int64
        )

    def score(self, doc_id: str, entity: str) -> float:
        """BM25 of a (possibly multi-token) entity string against one doc."""
        r = self._row[doc_id]
        lo, hi = self._indptr[r], self._indptr[r + 1]
        terms = self._terms[lo:hi]
        norm = self.k1 * (1.0 - self.b + self.b * self._len[r] / self.avgdl)
        acc = 0.0
        for tid in self.token_ids(entity):
            if tid < 0:
                continue
            pos = int(np.searchsorted(terms, tid))
            if pos < terms.shape[0] and terms[pos] == tid:
                tf = self._tf[lo + pos]
                acc += self._idf[tid] * (tf * (self.k1 + 1.0)) / (tf + norm)
        return acc

    def score_rows(self, doc_ids: list[str], entities: list[str]) -> np.ndarray:
        """BM25 matrix of shape (len(doc_ids), len(entities)) via the kernel."""
        rows = np.asarray([self._row[d] for d in doc_ids], dtype=np.int64)
        ent_ids = [self.token_ids(e) for e in entities]
        ent_indptr = np.zeros(len(entities) + 1, dtype=np.int64)
        for j, ids in enumerate(ent_ids):
            ent_indptr[j + 1] = ent_indptr[j] + ids.shape[0]
        flat = (
            np.concatenate(ent_ids)
            if ent_ids and ent_indptr[-1] > 0
            else np.zeros(0, dtype=np.int64)
        )
        return kernels.bm25_score_rows(
            rows,
            self._indptr,
            self._terms,
            self._tf,
            self._len,
            self.avgdl,
            self._idf,
            ent_indptr,
            flat,
            self.k1,
            self.b,
        )

    def doc_term_set(self, doc_id: str) -> set[int]:
        r = self._row[doc_id]
        return set(self._terms[self._indptr[r] : self._indptr[r + 1]].tolist())


def _safe_dst(own: float, neighbor_scores: np.ndarray) -> float:
    """exp(own) / (1 + sum(exp(neighbors))) with max-exponent subtraction."""
    m = max(0.0, own, float(neighbor_scores.max()) if neighbor_scores.size else 0.0)
    denom = math.exp(-m) + float(np.exp(neighbor_scores - m).sum())
    return math.exp(own - m) / denom


def distinctiveness(
    doc_id: str, entity: str, bm25: Bm25Index, index: NeighborIndex
) -> float:
    own = bm25.score(doc_id, entity)
    nbrs = index.of(doc_id)
    nbr_scores = np.asarray([bm25.score(d, entity) for d in nbrs], dtype=np.float64)
    return _safe_dst(own, nbr_scores)


def _dst_columns(scores: np.ndarray) -> np.ndarray:
    """Vectorized safe distinctiveness; row 0 is the document, the rest neighbors."""
    own = scores[0]
    nbr = scores[1:]
    if nbr.shape[0]:
        m = np.maximum(np.maximum(own, nbr.max(axis=0)), 0.0)
        denom = np.exp(-m) + np.exp(nbr - m[None, :]).sum(axis=0)
    else:
        m = np.maximum(own, 0.0)
        denom = np.exp(-m)
    return np.exp(own - m) / denom


@dataclass
class SoftLabelResult:
    labels: dict[str, float]  # entity -> y for entities of the document
    max_dst: float


def soft_labels(
    doc_id: str,
    doc_entities: list[str],
    bm25: Bm25Index,
    index: NeighborIndex,
    all_entities: list[str],
    max_over: str = "full",
) -> dict[str, float]:
    """Distinctiveness of each document entity, normalized by the max.

    ``max_over="full"`` normalizes by the maximum over the whole entity set
    (zero-overlap entities enter through their shared closed-form value);
    ``max_over="doc"`` normalizes over the document's own entities only.
    """
    if not doc_entities:
        raise ValueError(f"document {doc_id!r} has no entities to label")
    unknown = set(doc_entities) - set(all_entities)
    if unknown:
        raise ValueError(f"entities not in the canonical set: {sorted(unknown)[:3]}")
    table = soft_labels_for_corpus(
        {doc_id: doc_entities}, bm25, index, all_entities, max_over=max_over
    )
    return table[doc_id].labels


def soft_labels_for_corpus(
    doc_entities: dict[str, list[str]],
    bm25: Bm25Index,
    index: NeighborIndex,
    all_entities: list[str],
    max_over: str = "full",
) -> dict[str, SoftLabelResult]:
    if max_over not in ("full", "doc"):
        raise ValueError(f"max_over must be 'full' or 'doc', got {max_over!r}")
    ent_order = list(all_entities)
    ent_pos = {e: j for j, e in enumerate(ent_order)}
    # token -> entity columns, to find entities overlapping a document
    tok_to_ents: dict[int, list[int]] = {}
    for j, ent in enumerate(ent_order):
        for tid in set(bm25.token_ids(ent).tolist()):
            if tid >= 0:
                tok_to_ents.setdefault(tid, []).append(j)

    out: dict[str, SoftLabelResult] = {}
    for doc_id, ents in doc_entities.items():
        if not ents:
            raise ValueError(f"document {doc_id!r} has no entities to label")
        unknown = [e for e in ents if e not in ent_pos]
        if unknown:
            raise ValueError(
                f"{doc_id!r}: entities not in the canonical set: {unknown[:3]}"
            )
        nbrs = list(index.of(doc_id))
        k = len(nbrs)
        shared = 1.0 / (1.0 + k)  # all-zero BM25 columns
        terms: set[int] = set()
        for d in [doc_id] + nbrs:
            terms |= bm25.doc_term_set(d)
        overlap = set()
        for tid in terms:
            overlap.update(tok_to_ents.get(tid, ()))
        eval_cols = sorted(overlap | {ent_pos[e] for e in ents})
        eval_names = [ent_order[j] for j in eval_cols]
        if eval_names:
            scores = bm25.score_rows([doc_id] + nbrs, eval_names)
            dst = _dst_columns(scores)
        else:
            dst = np.zeros(0, dtype=np.float64)
        dst_by_name = dict(zip(eval_names, dst.tolist()))
        if max_over == "full":
            max_dst = max(dst.tolist(), default=0.0)
            if len(eval_cols) < len(ent_order):
                max_dst = max(max_dst, shared)
        else:
            max_dst = max(dst_by_name[e] for e in ents)
        labels = {e: dst_by_name[e] / max_dst for e in ents}
        out[doc_id] = SoftLabelResult(labels=labels, max_dst=max_dst)
    return out
