"""Per-document candidate entity/aspect construction.

Three candidate sources per document: surfaces from its own initial pairs,
surfaces lexically present in its text, and surfaces from the initial pairs
of its nearest neighbors. Candidates are counted once per source (so counts
range over {1, 2, 3}) and the top-M by count win, ties broken by name;
``count_mode="occurrences"`` switches to raw occurrence counting.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .model import CandidateSets, Document, PairSet, Vocabulary, normalize_surface
from .storage import EmbeddingStore

DEFAULT_K = 10
DEFAULT_M = 50


@dataclass(frozen=True)
class NeighborIndex:
    k: int
    neighbors: dict[str, tuple[str, ...]]

    def of(self, doc_id: str) -> tuple[str, ...]:
        return self.neighbors[doc_id]

    def to_record(self) -> dict:
        return {"k": self.k, "neighbors": {d: list(v) for d, v in sorted(self.neighbors.items())}}

    @classmethod
    def from_record(cls, rec: dict) -> "NeighborIndex":
        return cls(k=rec["k"], neighbors={d: tuple(v) for d, v in rec["neighbors"].items()})


def build_neighbor_index(
    store: EmbeddingStore, k: int = DEFAULT_K, chunk: int = 512
) -> NeighborIndex:
    """Exact top-k neighbors by cosine similarity; ties by doc id ascending."""
    ids = store.ids
    n = len(ids)
    if n < 2:
        return NeighborIndex(k=k, neighbors={d: () for d in ids})
    x = store.matrix.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    xn = x / norms
    # rank of each row under lexicographic doc_id order, for tie-breaking
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(n)
    kk = min(k, n - 1)
    neighbors: dict[str, tuple[str, ...]] = {}
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        sims = xn[lo:hi] @ xn.T
        for r in range(hi - lo):
            row = sims[r]
            row[lo + r] = -np.inf  # never self
            order = np.lexsort((id_rank, -row))
            neighbors[ids[lo + r]] = tuple(ids[j] for j in order[:kk])
    return NeighborIndex(k=k, neighbors=neighbors)


class _SurfaceMatcher:
    """Word-boundary containment tests for normalized surfaces."""

    def __init__(self, surfaces) -> None:
        self._patterns = [
            (s, re.compile(r"(?<![a-z0-9])" + re.escape(s) + r"(?![a-z0-9])"))
            for s in sorted(surfaces)
        ]

    def hits(self, normalized_text: str):
        return [s for s, pat in self._patterns if pat.search(normalized_text)]

    def hit_counts(self, normalized_text: str):
        return {
            s: len(pat.findall(normalized_text))
            for s, pat in self._patterns
            if pat.search(normalized_text)
        }


def _top_m(counts: dict[str, int], m: int) -> tuple[str, ...]:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(name for name, _ in ranked[:m])


def _candidate_side(
    doc: Document,
    own_pairs: PairSet | None,
    surfaces_to_canon: dict[str, str],
    own_side,  # PairSet -> iterable of surfaces
    matcher: _SurfaceMatcher,
    neighbor_pairs: list[PairSet],
    m: int,
    count_mode: str,
) -> tuple[str, ...]:
    text_norm = normalize_surface(doc.text)
    counts: dict[str, int] = {}

    def bump(canon_vals, weight_fn=None):
        for val in canon_vals:
            counts[val] = counts.get(val, 0) + (weight_fn(val) if weight_fn else 1)

    # source 1: own initial pairs
    own = set()
    occ_own: dict[str, int] = {}
    if own_pairs is not None:
        for surf in own_side(own_pairs):
            canon = surfaces_to_canon.get(surf)
            if canon is None:
                continue
            own.add(canon)
            occ_own[canon] = occ_own.get(canon, 0) + 1
    # source 2: lexical containment of any observed surface
    lex: dict[str, int] = {}
    for surf, n_hits in matcher.hit_counts(text_norm).items():
        canon = surfaces_to_canon.get(surf)
        if canon is None:
            continue
        lex[canon] = lex.get(canon, 0) + n_hits
    # source 3: pseudo-relevant surfaces from neighbor pairs
    pr: dict[str, int] = {}
    for ps in neighbor_pairs:
        for surf in own_side(ps):
            canon = surfaces_to_canon.get(surf)
            if canon is None:
                continue
            pr[canon] = pr.get(canon, 0) + 1

    if count_mode == "sets":
        bump(own)
        bump(lex.keys())
        bump(pr.keys())
    elif count_mode == "occurrences":
        bump(occ_own.keys(), occ_own.get)
        bump(lex.keys(), lex.get)
        bump(pr.keys(), pr.get)
    else:
        raise ValueError(f"unknown count_mode {count_mode!r}")
    return _top_m(counts, m)


def _entity_canon_table(vocab: Vocabulary) -> dict[str, str]:
    table = dict(vocab.entity_map)
    for e in vocab.entities:
        table.setdefault(e, e)
    return table


def _aspect_canon_table(vocab: Vocabulary) -> dict[str, str]:
    table = dict(vocab.aspect_map)
    for a in vocab.aspects:
        table.setdefault(a, a)
    return table


def candidate_entities(
    doc: Document,
    pairs_init: dict[str, PairSet],
    vocab: Vocabulary,
    index: NeighborIndex,
    m: int = DEFAULT_M,
    count_mode: str = "sets",
) -> tuple[str, ...]:
    table = _entity_canon_table(vocab)
    matcher = _SurfaceMatcher(table.keys())
    nbr = [pairs_init[d] for d in index.of(doc.doc_id) if d in pairs_init]
    return _candidate_side(
        doc,
        pairs_init.get(doc.doc_id),
        table,
        lambda ps: (p.entity for p in ps.pairs),
        matcher,
        nbr,
        m,
        count_mode,
    )


def candidate_aspects(
    doc: Document,
    pairs_init: dict[str, PairSet],
    vocab: Vocabulary,
    index: NeighborIndex,
    m: int = DEFAULT_M,
    count_mode: str = "sets",
) -> tuple[str, ...]:
    table = _aspect_canon_table(vocab)
    matcher = _SurfaceMatcher(table.keys())
    nbr = [pairs_init[d] for d in index.of(doc.doc_id) if d in pairs_init]
    return _candidate_side(
        doc,
        pairs_init.get(doc.doc_id),
        table,
        lambda ps: (p.aspect for p in ps.pairs),
        matcher,
        nbr,
        m,
        count_mode,
    )


def build_candidate_sets(
    docs: list[Document],
    pairs_init: dict[str, PairSet],
    vocab: Vocabulary,
    index: NeighborIndex,
    m: int = DEFAULT_M,
    count_mode: str = "sets",
) -> dict[str, CandidateSets]:
    """Candidate sets for a whole corpus, sharing the compiled matchers."""
    ent_table = _entity_canon_table(vocab)
    asp_table = _aspect_canon_table(vocab)
    ent_matcher = _SurfaceMatcher(ent_table.keys())
    asp_matcher = _SurfaceMatcher(asp_table.keys())
    out: dict[str, CandidateSets] = {}
    for doc in docs:
        nbr = [pairs_init[d] for d in index.of(doc.doc_id) if d in pairs_init]
        ents = _candidate_side(
            doc,
            pairs_init.get(doc.doc_id),
            ent_table,
            lambda ps: (p.entity for p in ps.pairs),
            ent_matcher,
            nbr,
            m,
            count_mode,
        )
        asps = _candidate_side(
            doc,
            pairs_init.get(doc.doc_id),
            asp_table,
            lambda ps: (p.aspect for p in ps.pairs),
            asp_matcher,
            nbr,
            m,
            count_mode,
        )
        out[doc.doc_id] = CandidateSets(
            doc_id=doc.doc_id, candidate_entities=ents, candidate_aspects=asps
        )
    return out
