"""Online inference: query pair construction and score fusion.

Two query modes share the same scoring path. The LLM mode reuses the
candidate-augmented document prompt on the query text; the fast mode skips
the LLM and takes the top predicted entities with their top predicted
aspects. Component scores are fused by reciprocal rank, so the final
ranking is invariant to any strictly monotone rescaling of raw scores.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    CandidateSets,
    PairSet,
    Query,
    RelevanceVector,
    SemanticPair,
    STAGE_FINAL,
    Vocabulary,
    make_pair_set,
)
from .pairgen import parse_pair_xml, render_pair_prompt
from .predictors import MlpModel, sigmoid
from .providers import EmbeddingProvider, LlmProvider
from .storage import EmbeddingStore

logger = logging.getLogger(__name__)

MODE_LLM = "pairsem"
MODE_FAST = "pairsem_fast"


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = MODE_FAST
    n_entities: int = 10  # top entities per query
    n_aspects: int = 5  # top aspects per selected entity
    rerank_pool_size: int = 1000
    candidate_m: int = 50  # query-side candidate list size for the LLM mode
    normalize_relevance: bool = False

    def __post_init__(self) -> None:
        if self.mode not in (MODE_LLM, MODE_FAST):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_entities < 1 or self.n_aspects < 1:
            raise ValueError("n_entities and n_aspects must be >= 1")
        if self.rerank_pool_size < 1:
            raise ValueError("rerank_pool_size must be >= 1")


@dataclass(frozen=True)
class RankedDoc:
    doc_id: str
    sim_base: float
    sim_pair: float
    sim_entity: float
    fused: float


@dataclass(frozen=True)
class ScoredRanking:
    query_id: str
    entries: tuple[RankedDoc, ...]

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


def _score_names(
    model: MlpModel, x: np.ndarray, name_matrix: np.ndarray
) -> np.ndarray:
    z = model.forward(x[None, :])[0]
    return sigmoid(name_matrix @ z)


def _top_by_score(names, scores: np.ndarray, n: int) -> list[str]:
    order = sorted(range(len(names)), key=lambda i: (-scores[i], names[i]))
    return [names[i] for i in order[:n]]


def query_pairs_fast(
    query_emb: np.ndarray,
    vocab: Vocabulary,
    entity_model: MlpModel,
    aspect_model: MlpModel,
    entity_store: EmbeddingStore,
    aspect_store: EmbeddingStore,
    cfg: InferenceConfig,
    owner_id: str = "query",
) -> PairSet:
    """Top-N entities by predicted relevance, each with its top-N aspects."""
    entities = list(vocab.entities)
    aspects = list(vocab.aspects)
    ent_matrix = entity_store.subset(entities)
    asp_matrix = aspect_store.subset(aspects)
    ent_scores = _score_names(entity_model, query_emb, ent_matrix)
    top_entities = _top_by_score(entities, ent_scores, cfg.n_entities)
    pairs: list[SemanticPair] = []
    for ent in top_entities:
        x = np.concatenate([query_emb, entity_store.vector(ent)])
        asp_scores = _score_names(aspect_model, x, asp_matrix)
        for asp in _top_by_score(aspects, asp_scores, cfg.n_aspects):
            pairs.append(SemanticPair(entity=ent, aspect=asp))
    return make_pair_set(owner_id, pairs, STAGE_FINAL)


def query_candidates(
    query_emb: np.ndarray,
    vocab: Vocabulary,
    entity_model: MlpModel | None,
    aspect_model: MlpModel | None,
    entity_store: EmbeddingStore | None,
    aspect_store: EmbeddingStore | None,
    m: int,
    corpus_entity_freq: dict[str, int] | None = None,
    corpus_aspect_freq: dict[str, int] | None = None,
) -> CandidateSets:
    """Query-side candidate lists for the LLM mode.

    With trained predictors: top-M entities by predicted relevance and top-M
    aspects by their best score over those entities. Otherwise: the top-M
    most frequent corpus entities/aspects.
    """
    entities = list(vocab.entities)
    aspects = list(vocab.aspects)
    if entity_model is not None and aspect_model is not None:
        ent_scores = _score_names(
            entity_model, query_emb, entity_store.subset(entities)
        )
        top_ents = _top_by_score(entities, ent_scores, m)
        asp_matrix = aspect_store.subset(aspects)
        best = np.full(len(aspects), -np.inf)
        for ent in top_ents[: min(len(top_ents), 10)]:
            x = np.concatenate([query_emb, entity_store.vector(ent)])
            best = np.maximum(best, _score_names(aspect_model, x, asp_matrix))
        top_asps = _top_by_score(aspects, best, m)
    else:
        if not corpus_entity_freq or not corpus_aspect_freq:
            raise ValueError(
                "query candidates need either trained predictors or corpus frequencies"
            )
        top_ents = [
            e
            for e, _ in sorted(
                corpus_entity_freq.items(), key=lambda kv: (-kv[1], kv[0])
            )[:m]
        ]
        top_asps = [
            a
            for a, _ in sorted(
                corpus_aspect_freq.items(), key=lambda kv: (-kv[1], kv[0])
            )[:m]
        ]
    return CandidateSets(
        doc_id="query", candidate_entities=tuple(top_ents), candidate_aspects=tuple(top_asps)
    )


def query_pairs_llm(
    query: Query,
    vocab: Vocabulary,
    llm: LlmProvider,
    candidates: CandidateSets,
    owner_id: str | None = None,
) -> PairSet:
    """Candidate-augmented generation applied to the query text."""
    if not query.text.strip():
        raise ValueError("query text must be non-empty")
    from .model import Document

    as_doc = Document(doc_id=query.query_id, text=query.text)
    req = render_pair_prompt(as_doc, candidates)
    result = parse_pair_xml(llm.generate(req))
    pairs: list[SemanticPair] = []
    for p in result.pairs:
        ent = vocab.canon_entity(p.entity)
        asp = vocab.canon_aspect(p.aspect)
        if ent is None or asp is None:
            continue
        pairs.append(SemanticPair(entity=ent, aspect=asp))
    if not pairs:
        logger.warning("no canonical pairs extracted for query %s", query.query_id)
    return make_pair_set(owner_id or query.query_id, pairs, STAGE_FINAL)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def sim_pair(
    query_pairs: PairSet, doc_pairs: PairSet, aspect_vectors
) -> float:
    """Mean over query pairs of the best same-entity aspect similarity.

    For each query pair the max runs over all document pairs of
    (entity match indicator) * cosine(aspect embeddings); a query pair whose
    entity never occurs in the document contributes 0. Empty query pair sets
    score 0 by convention.
    """
    if not query_pairs.pairs:
        return 0.0
    total = 0.0
    for qp in query_pairs.pairs:
        best = None
        for dp in doc_pairs.pairs:
            val = (
                _cosine(aspect_vectors[qp.aspect], aspect_vectors[dp.aspect])
                if qp.entity == dp.entity
                else 0.0
            )
            best = val if best is None or val > best else best
        total += best if best is not None else 0.0
    return total / len(query_pairs.pairs)


def sim_entity(yq: RelevanceVector, yd: RelevanceVector, normalize: bool = False) -> float:
    """Inner product of query relevance with the log of document relevance.

    This is the ranking-relevant part of the negative KL divergence between
    the two relevance vectors; the dropped entropy term is constant per
    query. ``normalize=True`` first scales both vectors to sum to one.
    """
    if yq.values.keys() != yd.values.keys():
        raise ValueError("relevance vectors must cover identical entity sets")
    keys = sorted(yq.values)
    q = np.asarray([yq.values[k] for k in keys], dtype=np.float64)
    d = np.asarray([yd.values[k] for k in keys], dtype=np.float64)
    if np.any(d <= 0.0) or np.any(d >= 1.0):
        raise ValueError("document relevance values must lie strictly inside (0, 1)")
    if normalize:
        q = q / q.sum()
        d = d / d.sum()
    return float(np.dot(q, np.log(d)))


def _component_ranks(pool: list[str], scores: dict[str, float]) -> dict[str, int]:
    """1-based ranks, best first; score ties broken by doc_id ascending."""
    order = sorted(pool, key=lambda d: (-scores[d], d))
    return {d: i + 1 for i, d in enumerate(order)}


def fuse_and_rank(
    query_id: str,
    pool: list[str],
    sim_base: dict[str, float],
    sim_pair_scores: dict[str, float],
    sim_entity_scores: dict[str, float],
) -> ScoredRanking:
    """Reciprocal-rank fusion: h(base) + (h(pair) + h(entity)) / 2."""
    if not pool:
        return ScoredRanking(query_id=query_id, entries=())
    rb = _component_ranks(pool, sim_base)
    rp = _component_ranks(pool, sim_pair_scores)
    re_ = _component_ranks(pool, sim_entity_scores)
    entries = []
    for d in pool:
        fused = 1.0 / (1.0 + rb[d]) + (1.0 / (1.0 + rp[d]) + 1.0 / (1.0 + re_[d])) / 2.0
        entries.append(
            RankedDoc(
                doc_id=d,
                sim_base=sim_base[d],
                sim_pair=sim_pair_scores[d],
                sim_entity=sim_entity_scores[d],
                fused=fused,
            )
        )
    entries.sort(key=lambda e: (-e.fused, -e.sim_base, e.doc_id))
    return ScoredRanking(query_id=query_id, entries=tuple(entries))


@dataclass
class OfflineArtifacts:
    """Everything the online stage needs, loaded once."""

    vocab: Vocabulary
    doc_pairs: dict[str, PairSet]
    doc_store: EmbeddingStore
    entity_store: EmbeddingStore
    aspect_store: EmbeddingStore
    doc_relevance: dict[str, RelevanceVector]
    entity_model: MlpModel | None = None
    aspect_model: MlpModel | None = None
    corpus_entity_freq: dict[str, int] = field(default_factory=dict)
    corpus_aspect_freq: dict[str, int] = field(default_factory=dict)


def retrieve(
    query: Query,
    arts: OfflineArtifacts,
    cfg: InferenceConfig,
    embedder: EmbeddingProvider | None = None,
    llm: LlmProvider | None = None,
    query_pair_override: PairSet | None = None,
) -> ScoredRanking:
    """Embed the query, rerank the top base-retrieval pool by fused score."""
    if query.embedding is not None:
        q_emb = query.embedding
    else:
        if embedder is None:
            raise ValueError("query has no embedding and no embedder was given")
        q_emb = embedder.embed([query.text])[0]

    doc_ids = arts.doc_store.ids
    matrix = arts.doc_store.matrix
    norms = np.linalg.norm(matrix, axis=1)
    norms[norms == 0.0] = 1.0
    qn = float(np.linalg.norm(q_emb))
    qv = q_emb / (qn if qn else 1.0)
    base = (matrix @ qv) / norms
    order = sorted(range(len(doc_ids)), key=lambda i: (-base[i], doc_ids[i]))
    pool_idx = order[: cfg.rerank_pool_size]
    pool = [doc_ids[i] for i in pool_idx]
    sim_base = {doc_ids[i]: float(base[i]) for i in pool_idx}

    if query_pair_override is not None:
        q_pairs = query_pair_override
    elif cfg.mode == MODE_FAST:
        if arts.entity_model is None or arts.aspect_model is None:
            raise ValueError("fast mode requires trained entity and aspect models")
        q_pairs = query_pairs_fast(
            q_emb,
            arts.vocab,
            arts.entity_model,
            arts.aspect_model,
            arts.entity_store,
            arts.aspect_store,
            cfg,
            owner_id=query.query_id,
        )
    else:
        if llm is None:
            raise ValueError("LLM mode requires an LLM provider")
        cands = query_candidates(
            q_emb,
            arts.vocab,
            arts.entity_model,
            arts.aspect_model,
            arts.entity_store,
            arts.aspect_store,
            cfg.candidate_m,
            arts.corpus_entity_freq,
            arts.corpus_aspect_freq,
        )
        q_pairs = query_pairs_llm(query, arts.vocab, llm, cands)

    aspect_vectors = {a: arts.aspect_store.vector(a) for a in arts.vocab.aspects}
    pair_scores = {
        d: sim_pair(q_pairs, arts.doc_pairs[d], aspect_vectors) if d in arts.doc_pairs else 0.0
        for d in pool
    }

    if arts.entity_model is not None:
        ent_matrix = arts.entity_store.subset(list(arts.vocab.entities))
        probs = sigmoid(ent_matrix @ arts.entity_model.forward(q_emb[None, :])[0])
        yq = RelevanceVector(
            owner_id=query.query_id,
            values=dict(zip(arts.vocab.entities, probs.tolist())),
        )
        entity_scores = {
            d: sim_entity(yq, arts.doc_relevance[d], cfg.normalize_relevance)
            if d in arts.doc_relevance
            else -math.inf
            for d in pool
        }
        if any(v == -math.inf for v in entity_scores.values()):
            finite = [v for v in entity_scores.values() if v != -math.inf]
            lowest = min(finite) if finite else 0.0
            entity_scores = {
                d: (v if v != -math.inf else lowest - 1.0)
                for d, v in entity_scores.items()
            }
    else:
        entity_scores = {d: 0.0 for d in pool}

    return fuse_and_rank(query.query_id, pool, sim_base, pair_scores, entity_scores)
