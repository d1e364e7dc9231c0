"""Deterministic synthetic corpus with planted entity-aspect structure.

Documents are templated, not natural language: every planted pair appears
as a sentence ``ENTITY: <e> | ASPECT: <a>.`` interleaved with distractor
sentences, so the oracle extractor can recover the exact gold pairs and
the whole pipeline can be verified end to end without any model. Synonymy
is planted by sometimes writing an alternative surface for an entity or
aspect; queries may use a different surface than their target document,
which is precisely the gap pair matching is meant to close.

Generation is a pure function of the spec: same spec and seed, byte
identical corpus.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import Qrels
from .model import Document, PairSet, Query, SemanticPair, STAGE_FINAL, STAGE_INITIAL, make_pair_set
from .providers import planted_pair_sentence
from .storage import atomic_write_text, dump_json, load_json, load_jsonl, save_json, save_jsonl

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_docs: int = 200
    n_entities: int = 192
    n_topics: int = 12  # entities are split over topics; a doc draws one topic
    n_aspects: int = 300
    aspects_per_entity_mean: float = 8.0
    pairs_per_doc_mean: float = 16.0
    pairs_per_doc_spread: int = 3
    synonym_groups: int = 192
    queries_per_doc: float = 0.35
    query_min_pairs: int = 4
    query_max_pairs: int = 8
    query_distractor_words: int = 10
    distractor_vocab: int = 1500
    distractor_words_per_sentence: int = 5
    qrel_threshold: int = 2

    def __post_init__(self) -> None:
        for name in (
            "n_docs",
            "n_entities",
            "n_topics",
            "n_aspects",
            "query_min_pairs",
            "query_max_pairs",
            "distractor_vocab",
            "distractor_words_per_sentence",
            "qrel_threshold",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.query_min_pairs > self.query_max_pairs:
            raise ValueError("query_min_pairs must be <= query_max_pairs")
        if self.aspects_per_entity_mean < 1 or self.pairs_per_doc_mean < 1:
            raise ValueError("distribution means must be >= 1")
        if self.synonym_groups < 0 or self.pairs_per_doc_spread < 0:
            raise ValueError("synonym_groups and spread must be >= 0")
        if self.queries_per_doc <= 0:
            raise ValueError("queries_per_doc must be positive")
        if self.n_topics > self.n_entities:
            raise ValueError("n_topics cannot exceed n_entities")
        # every topic must offer at least pairs_per_doc distinct (e, a) combos
        min_topic_entities = self.n_entities // self.n_topics
        if round(self.pairs_per_doc_mean) + self.pairs_per_doc_spread > min_topic_entities * round(
            self.aspects_per_entity_mean
        ):
            raise ValueError(
                "infeasible spec: pairs per document exceed a topic's entity-aspect grid"
            )
        if self.synonym_groups > self.n_entities or self.synonym_groups > self.n_aspects:
            raise ValueError("more synonym groups than names to attach them to")

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_record(cls, rec: dict) -> "SynthSpec":
        return cls(**rec)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    documents: list[Document]
    gold_surface_pairs: dict[str, PairSet]
    gold_canonical_pairs: dict[str, PairSet]
    entity_canon: dict[str, str]  # surface -> canonical, identity included
    aspect_canon: dict[str, str]
    canonical_entities: tuple[str, ...]
    canonical_aspects: tuple[str, ...]
    queries: list[Query]
    gold_query_pairs: dict[str, PairSet]
    qrels: Qrels

    def save(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_json(self.spec.to_record(), outdir / "synth_spec.json")
        save_jsonl((d.to_record() for d in self.documents), outdir / "documents.jsonl")
        save_jsonl((q.to_record() for q in self.queries), outdir / "queries.jsonl")
        save_jsonl(
            (self.gold_surface_pairs[d.doc_id].to_record() for d in self.documents),
            outdir / "gold_pairs_surface.jsonl",
        )
        save_jsonl(
            (self.gold_canonical_pairs[d.doc_id].to_record() for d in self.documents),
            outdir / "gold_pairs_canonical.jsonl",
        )
        save_jsonl(
            (self.gold_query_pairs[q.query_id].to_record() for q in self.queries),
            outdir / "gold_query_pairs.jsonl",
        )
        save_json(
            {
                "entity_canon": self.entity_canon,
                "aspect_canon": self.aspect_canon,
                "entities": list(self.canonical_entities),
                "aspects": list(self.canonical_aspects),
            },
            outdir / "gold_synonyms.json",
        )
        lines = []
        for qid in sorted(self.qrels.relevant):
            for did in sorted(self.qrels.relevant[qid]):
                lines.append(f"{qid}\t{did}\t1\n")
        atomic_write_text(outdir / "qrels.tsv", "".join(lines))

    @classmethod
    def load(cls, outdir: str | Path) -> "SynthCorpus":
        outdir = Path(outdir)
        spec = SynthSpec.from_record(load_json(outdir / "synth_spec.json"))
        documents = [Document.from_record(r) for r in load_jsonl(outdir / "documents.jsonl")]
        queries = [Query.from_record(r) for r in load_jsonl(outdir / "queries.jsonl")]
        surface = {
            r["owner_id"]: PairSet.from_record(r)
            for r in load_jsonl(outdir / "gold_pairs_surface.jsonl")
        }
        canonical = {
            r["owner_id"]: PairSet.from_record(r)
            for r in load_jsonl(outdir / "gold_pairs_canonical.jsonl")
        }
        query_pairs = {
            r["owner_id"]: PairSet.from_record(r)
            for r in load_jsonl(outdir / "gold_query_pairs.jsonl")
        }
        syn = load_json(outdir / "gold_synonyms.json")
        qrels = read_qrels(outdir / "qrels.tsv")
        return cls(
            spec=spec,
            documents=documents,
            gold_surface_pairs=surface,
            gold_canonical_pairs=canonical,
            entity_canon=dict(syn["entity_canon"]),
            aspect_canon=dict(syn["aspect_canon"]),
            canonical_entities=tuple(syn["entities"]),
            canonical_aspects=tuple(syn["aspects"]),
            queries=queries,
            gold_query_pairs=query_pairs,
            qrels=qrels,
        )


def read_qrels(path: str | Path) -> Qrels:
    relevant: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            qid, did, label = line.split("\t")
            if int(label) >= 1:
                relevant.setdefault(qid, set()).add(did)
    return Qrels(relevant=relevant)


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def _unique_words(rng: np.random.Generator, count: int, syllables: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < count:
        w = _word(rng, syllables)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate_corpus(spec: SynthSpec) -> SynthCorpus:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    taken: set[str] = set()

    # every name token is unique so names never collide on shared tokens
    ent_heads = _unique_words(rng, spec.n_entities, 3, taken)
    ent_tails = _unique_words(rng, spec.n_entities, 2, taken)
    asp_heads = _unique_words(rng, spec.n_aspects, 3, taken)
    asp_tails = _unique_words(rng, spec.n_aspects, 2, taken)
    entities = [f"{h} {t}" for h, t in zip(ent_heads, ent_tails)]
    aspects = [f"{h} {t}" for h, t in zip(asp_heads, asp_tails)]
    distractors = _unique_words(rng, spec.distractor_vocab, 2, taken)

    # plant synonym groups: alternative surfaces for some entities/aspects.
    # Variants keep the head word and swap the tail ("veltrax oxide" vs
    # "veltrax hydrate"), so they stay close in embedding space (they
    # cluster together) while halving the token overlap a lexical matcher
    # sees between two mentions of the same concept.
    def add_variants(surfaces: dict[int, list[str]], names: list[str], chosen) -> None:
        for i in chosen:
            i = int(i)
            head = names[i].split()[0]
            n_variants = int(rng.integers(1, 3))
            for tail in _unique_words(rng, n_variants, 2, taken):
                surfaces[i].append(f"{head} {tail}")

    entity_surfaces: dict[int, list[str]] = {i: [entities[i]] for i in range(spec.n_entities)}
    aspect_surfaces: dict[int, list[str]] = {i: [aspects[i]] for i in range(spec.n_aspects)}
    add_variants(entity_surfaces, entities, rng.choice(spec.n_entities, size=spec.synonym_groups, replace=False))
    add_variants(aspect_surfaces, aspects, rng.choice(spec.n_aspects, size=spec.synonym_groups, replace=False))

    entity_canon = {
        surf: entities[i] for i, surfs in entity_surfaces.items() for surf in surfs
    }
    aspect_canon = {
        surf: aspects[i] for i, surfs in aspect_surfaces.items() for surf in surfs
    }

    # per-entity allowed aspect sets
    allowed: list[np.ndarray] = []
    for _ in range(spec.n_entities):
        size = int(
            np.clip(
                round(rng.normal(spec.aspects_per_entity_mean, spec.aspects_per_entity_mean / 3.0)),
                1,
                spec.n_aspects,
            )
        )
        allowed.append(rng.choice(spec.n_aspects, size=size, replace=False))

    # topic t owns entities t, t + n_topics, t + 2*n_topics, ...
    topic_grid: list[list[tuple[int, int]]] = []
    for t in range(spec.n_topics):
        grid = [
            (e, int(a))
            for e in range(t, spec.n_entities, spec.n_topics)
            for a in allowed[e]
        ]
        topic_grid.append(grid)

    def distractor_sentence(n_words: int) -> str:
        words = " ".join(
            distractors[rng.integers(len(distractors))] for _ in range(n_words)
        )
        return f"Filler {words}."

    lo = max(1, round(spec.pairs_per_doc_mean) - spec.pairs_per_doc_spread)
    hi = round(spec.pairs_per_doc_mean) + spec.pairs_per_doc_spread

    documents: list[Document] = []
    gold_surface: dict[str, PairSet] = {}
    gold_canonical: dict[str, PairSet] = {}
    width = len(str(spec.n_docs - 1))
    for d in range(spec.n_docs):
        doc_id = f"doc{d:0{width}d}"
        grid = topic_grid[int(rng.integers(spec.n_topics))]
        n_pairs = min(int(rng.integers(lo, hi + 1)), len(grid))
        picked = rng.choice(len(grid), size=n_pairs, replace=False)
        sentences = [distractor_sentence(spec.distractor_words_per_sentence)]
        surf_pairs: list[SemanticPair] = []
        canon_pairs: list[SemanticPair] = []
        for gi in picked:
            ei, ai = grid[int(gi)]
            e_surf = entity_surfaces[ei][rng.integers(len(entity_surfaces[ei]))]
            a_surf = aspect_surfaces[ai][rng.integers(len(aspect_surfaces[ai]))]
            sentences.append(planted_pair_sentence(e_surf, a_surf))
            sentences.append(distractor_sentence(spec.distractor_words_per_sentence))
            surf_pairs.append(SemanticPair(entity=e_surf, aspect=a_surf))
            canon_pairs.append(SemanticPair(entity=entities[ei], aspect=aspects[ai]))
        documents.append(Document(doc_id=doc_id, text=" ".join(sentences)))
        gold_surface[doc_id] = make_pair_set(doc_id, surf_pairs, STAGE_INITIAL)
        gold_canonical[doc_id] = make_pair_set(doc_id, canon_pairs, STAGE_FINAL)

    n_queries = max(1, round(spec.n_docs * spec.queries_per_doc))
    n_queries = min(n_queries, spec.n_docs)
    targets = rng.choice(spec.n_docs, size=n_queries, replace=False)
    queries: list[Query] = []
    gold_query_pairs: dict[str, PairSet] = {}
    relevant: dict[str, set[str]] = {}
    qwidth = len(str(n_queries - 1)) if n_queries > 1 else 1
    for qi, target in enumerate(targets):
        query_id = f"q{qi:0{qwidth}d}"
        target_pairs = gold_canonical[documents[int(target)].doc_id].pairs
        k_hi = min(spec.query_max_pairs, len(target_pairs))
        k_lo = min(spec.query_min_pairs, k_hi)
        k = int(rng.integers(k_lo, k_hi + 1))
        picked = rng.choice(len(target_pairs), size=k, replace=False)
        sentences = []
        canon_pairs = []
        for pi in picked:
            pair = target_pairs[int(pi)]
            ei = entities.index(pair.entity)
            ai = aspects.index(pair.aspect)
            e_surf = entity_surfaces[ei][rng.integers(len(entity_surfaces[ei]))]
            a_surf = aspect_surfaces[ai][rng.integers(len(aspect_surfaces[ai]))]
            sentences.append(planted_pair_sentence(e_surf, a_surf))
            canon_pairs.append(pair)
        sentences.append(distractor_sentence(spec.query_distractor_words))
        queries.append(
            Query(query_id=query_id, text="Find studies of " + " ".join(sentences))
        )
        qps = make_pair_set(query_id, canon_pairs, STAGE_FINAL)
        gold_query_pairs[query_id] = qps
        qset = set(qps.pairs)
        rel = {
            doc.doc_id
            for doc in documents
            if len(qset & set(gold_canonical[doc.doc_id].pairs)) >= spec.qrel_threshold
        }
        relevant[query_id] = rel

    return SynthCorpus(
        spec=spec,
        documents=documents,
        gold_surface_pairs=gold_surface,
        gold_canonical_pairs=gold_canonical,
        entity_canon=entity_canon,
        aspect_canon=aspect_canon,
        canonical_entities=tuple(sorted(entities)),
        canonical_aspects=tuple(sorted(aspects)),
        queries=queries,
        gold_query_pairs=gold_query_pairs,
        qrels=Qrels(relevant=relevant),
    )
