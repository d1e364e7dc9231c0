"""Stage-oriented pipeline orchestration over one working directory.

Stage graph (artifacts in parentheses):

    synth            (documents.jsonl, queries.jsonl, qrels.tsv, gold_*)
    gen-pairs        (pairs_init.jsonl)            zero-shot mode
    build-vocab      (vocab.json)
    gen-candidates   (neighbors.json, candidates.jsonl)
    gen-pairs        (pairs_final.jsonl)           candidate mode
    soft-labels      (labels.jsonl)
    train            (models/*.mlp, relevance.jsonl)
    eval-predictors / query (runs/*.tsv) / eval / sweep / report

Every stage writes its artifact atomically and drops a JSON report (timing,
item counts, provider usage) under reports/. Reports are the only outputs
that vary between identical runs; data artifacts are byte-stable. A stage
whose outputs are newer than its inputs is skipped unless forced. One stage
runs at a time per working directory (lock file).
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import kernels
from .candidates import NeighborIndex, build_candidate_sets, build_neighbor_index
from .evaluation import (
    MetricReport,
    Qrels,
    evaluate_run,
    parse_metric_spec,
    precision_at_k_predictor,
)
from .matching import (
    InferenceConfig,
    MODE_FAST,
    MODE_LLM,
    OfflineArtifacts,
    retrieve,
)
from .model import Document, PairSet, Query, RelevanceVector, Vocabulary
from .pairgen import MODE_CANDIDATE, MODE_ZERO_SHOT, generate_pairs_for_corpus
from .predictors import (
    MlpModel,
    TrainConfig,
    TrainResult,
    relevance_vector,
    sigmoid,
    train_aspect_predictor,
    train_entity_predictor,
)
from .providers import (
    EmbeddingProvider,
    HttpEmbeddingProvider,
    HttpLlmProvider,
    LlmProvider,
    OracleExtractorLlm,
    ProviderUsage,
    ReplayLlmProvider,
    TokenHashEmbedder,
)
from .relevance import Bm25Index, soft_labels_for_corpus
from .storage import (
    EmbeddingStore,
    atomic_write_bytes,
    atomic_write_text,
    dump_json,
    load_json,
    load_jsonl,
    save_json,
    save_jsonl,
)
from .synth import SynthCorpus, SynthSpec, generate_corpus, read_qrels

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_DEP = 2


class StageError(Exception):
    exit_code = EXIT_ERROR


class MissingDependencyError(StageError):
    exit_code = EXIT_MISSING_DEP


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate_env(obj):
    if isinstance(obj, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise StageError(f"config references unset environment variable {name}")
            return os.environ[name]

        return _ENV_RE.sub(sub, obj)
    if isinstance(obj, dict):
        return {k: _interpolate_env(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_interpolate_env(v) for v in obj]
    return obj


@dataclass
class PipelineConfig:
    """All knobs for one working directory; defaults follow the method's
    stated settings (M=50, k=10, cluster cap 20, N_e=10, N_a=5)."""

    llm: dict = field(default_factory=lambda: {"kind": "oracle"})
    embedding: dict = field(
        default_factory=lambda: {"kind": "hash", "dim": 256, "seed": 0}
    )
    candidate_m: int = 50
    knn_k: int = 10
    max_cluster_size: int = 20
    n_entities_query: int = 10
    n_aspects_query: int = 5
    rerank_pool_size: int = 1000
    softlabel_max_over: str = "full"
    candidate_count_mode: str = "sets"
    normalize_relevance: bool = False
    temperature: float = 0.0
    max_tokens: int = 2048
    train_entity: dict = field(default_factory=dict)
    train_aspect: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    @classmethod
    def load(cls, workdir: Path, config_path: Path | None = None) -> "PipelineConfig":
        path = config_path or (workdir / "config.yaml")
        if not path.exists():
            return cls()
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        raw = _interpolate_env(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise StageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def entity_train_config(self) -> TrainConfig:
        return TrainConfig(**self.train_entity)

    def aspect_train_config(self) -> TrainConfig:
        return TrainConfig(**self.train_aspect)

    def inference_config(self, mode: str, pool: int | None = None) -> InferenceConfig:
        return InferenceConfig(
            mode=mode,
            n_entities=self.n_entities_query,
            n_aspects=self.n_aspects_query,
            rerank_pool_size=pool or self.rerank_pool_size,
            candidate_m=self.candidate_m,
            normalize_relevance=self.normalize_relevance,
        )


class Paths:
    """Canonical artifact locations inside a working directory."""

    def __init__(self, workdir: str | Path):
        self.workdir = Path(workdir)
        w = self.workdir
        self.config = w / "config.yaml"
        self.documents = w / "documents.jsonl"
        self.queries = w / "queries.jsonl"
        self.qrels = w / "qrels.tsv"
        self.gold_synonyms = w / "gold_synonyms.json"
        self.doc_embeddings = w / "embeddings"  # prefix -> .npy / .ids.json
        self.entity_embeddings = w / "entity_embeddings"
        self.aspect_embeddings = w / "aspect_embeddings"
        self.pairs_init = w / "pairs_init.jsonl"
        self.vocab = w / "vocab.json"
        self.neighbors = w / "neighbors.json"
        self.candidates = w / "candidates.jsonl"
        self.pairs_final = w / "pairs_final.jsonl"
        self.labels = w / "labels.jsonl"
        self.relevance = w / "relevance.jsonl"
        self.models = w / "models"
        self.entity_model = self.models / "entity.mlp"
        self.aspect_model = self.models / "aspect.mlp"
        self.runs = w / "runs"
        self.reports = w / "reports"
        self.lock = w / ".pairsem.lock"

    def run_file(self, mode: str) -> Path:
        return self.runs / f"run_{mode}.tsv"


class WorkdirLock:
    def __init__(self, paths: Paths):
        self.path = paths.lock
        self._fd: int | None = None

    def __enter__(self) -> "WorkdirLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise StageError(
                f"working directory is locked by another run ({self.path})"
            ) from exc
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(self.path)


def _require(paths: list[Path], stage: str) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingDependencyError(
            f"stage {stage!r} is missing required artifacts: {', '.join(missing)}"
        )


def _up_to_date(inputs: list[Path], outputs: list[Path]) -> bool:
    if not outputs or not all(p.exists() for p in outputs):
        return False
    newest_in = max((p.stat().st_mtime for p in inputs if p.exists()), default=0.0)
    oldest_out = min(p.stat().st_mtime for p in outputs)
    return oldest_out >= newest_in


def make_llm_provider(cfg: PipelineConfig, paths: Paths) -> LlmProvider:
    kind = cfg.llm.get("kind", "oracle")
    if kind == "oracle":
        if not paths.gold_synonyms.exists():
            raise MissingDependencyError(
                "oracle provider needs gold_synonyms.json (run the synth stage)"
            )
        gold = load_json(paths.gold_synonyms)
        return OracleExtractorLlm(gold["entity_canon"], gold["aspect_canon"])
    if kind == "replay":
        fixtures = cfg.llm.get("fixtures_dir") or str(paths.workdir / "fixtures" / "llm")
        return ReplayLlmProvider(fixtures)
    if kind == "http":
        return HttpLlmProvider(
            base_url=cfg.llm.get("base_url"),
            api_key=cfg.llm.get("api_key"),
            model=cfg.llm.get("model", "gpt-4.1-mini"),
            max_attempts=int(cfg.llm.get("max_attempts", 3)),
            parallelism=int(cfg.llm.get("parallelism", 4)),
        )
    raise StageError(f"unknown llm provider kind {kind!r}")


def make_embedding_provider(cfg: PipelineConfig) -> EmbeddingProvider:
    kind = cfg.embedding.get("kind", "hash")
    if kind == "hash":
        return TokenHashEmbedder(
            dim=int(cfg.embedding.get("dim", 256)),
            seed=int(cfg.embedding.get("seed", 0)),
        )
    if kind == "http":
        return HttpEmbeddingProvider(
            dim=int(cfg.embedding["dim"]),
            base_url=cfg.embedding.get("base_url"),
            api_key=cfg.embedding.get("api_key"),
            model=cfg.embedding.get("model", "text-embedding-3-small"),
            batch_size=int(cfg.embedding.get("batch_size", 64)),
        )
    raise StageError(f"unknown embedding provider kind {kind!r}")


def load_documents(paths: Paths) -> list[Document]:
    return [Document.from_record(r) for r in load_jsonl(paths.documents)]


def load_queries(paths: Paths) -> list[Query]:
    return [Query.from_record(r) for r in load_jsonl(paths.queries)]


def load_pair_sets(path: Path) -> dict[str, PairSet]:
    return {r["owner_id"]: PairSet.from_record(r) for r in load_jsonl(path)}


def ensure_doc_embeddings(
    paths: Paths, docs: list[Document], embedder: EmbeddingProvider
) -> EmbeddingStore:
    if EmbeddingStore.exists(paths.doc_embeddings):
        store = EmbeddingStore.load(paths.doc_embeddings)
        if store.ids == [d.doc_id for d in docs]:
            return store
    store = EmbeddingStore(
        [d.doc_id for d in docs], embedder.embed([d.text for d in docs])
    )
    store.save(paths.doc_embeddings)
    return store


def ensure_name_embeddings(
    prefix: Path, names: list[str], embedder: EmbeddingProvider
) -> EmbeddingStore:
    if EmbeddingStore.exists(prefix):
        store = EmbeddingStore.load(prefix)
        if store.ids == list(names):
            return store
    store = EmbeddingStore(list(names), embedder.embed(list(names)))
    store.save(prefix)
    return store


def _write_report(paths: Paths, stage: str, report: dict) -> None:
    paths.reports.mkdir(parents=True, exist_ok=True)
    save_json(report, paths.reports / f"{stage}.json")


def _report(stage: str, started: float, **extra) -> dict:
    rep = {"stage": stage, "seconds": round(time.monotonic() - started, 3)}
    rep.update(extra)
    return rep


# ---------------------------------------------------------------------------
# stages


def stage_synth(paths: Paths, cfg: PipelineConfig, spec: SynthSpec | None = None) -> dict:
    started = time.monotonic()
    spec = spec or SynthSpec(**cfg.synth)
    corpus = generate_corpus(spec)
    corpus.save(paths.workdir)
    report = _report(
        "synth",
        started,
        docs=len(corpus.documents),
        queries=len(corpus.queries),
        entities=len(corpus.canonical_entities),
        aspects=len(corpus.canonical_aspects),
        kernel_backend=kernels.BACKEND,
    )
    _write_report(paths, "synth", report)
    return report


def stage_gen_pairs(paths: Paths, cfg: PipelineConfig, mode: str) -> dict:
    started = time.monotonic()
    _require([paths.documents], "gen-pairs")
    docs = load_documents(paths)
    llm = make_llm_provider(cfg, paths)
    if mode == MODE_ZERO_SHOT:
        results, stats = generate_pairs_for_corpus(
            docs, llm, mode, temperature=cfg.temperature, max_tokens=cfg.max_tokens
        )
        out_path = paths.pairs_init
    elif mode == MODE_CANDIDATE:
        _require([paths.candidates, paths.vocab], "gen-pairs --mode candidate")
        vocab = Vocabulary.from_record(load_json(paths.vocab))
        cands = {
            r["doc_id"]: _candidate_from_record(r)
            for r in load_jsonl(paths.candidates)
        }
        results, stats = generate_pairs_for_corpus(
            docs,
            llm,
            mode,
            candidates=cands,
            vocab=vocab,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
        )
        out_path = paths.pairs_final
    else:
        raise StageError(f"unknown gen-pairs mode {mode!r}")
    save_jsonl((results[d.doc_id].to_record() for d in docs if d.doc_id in results), out_path)
    report = _report(
        f"gen-pairs[{mode}]",
        started,
        **stats.to_record(),
        usage=ProviderUsage.from_calls(llm.calls).to_record(),
    )
    _write_report(paths, f"gen_pairs_{mode}", report)
    return report


def _candidate_from_record(rec: dict):
    from .model import CandidateSets

    return CandidateSets.from_record(rec)


def stage_build_vocab(paths: Paths, cfg: PipelineConfig) -> dict:
    started = time.monotonic()
    _require([paths.pairs_init], "build-vocab")
    from .vocab import build_vocabulary, collect_initial_sets

    pairs_init = load_pair_sets(paths.pairs_init)
    e_init, a_init = collect_initial_sets(pairs_init)
    llm = make_llm_provider(cfg, paths)
    embedder = make_embedding_provider(cfg)
    vocab, stats = build_vocabulary(
        e_init, a_init, embedder, llm, max_cluster_size=cfg.max_cluster_size
    )
    save_json(vocab.to_record(), paths.vocab)
    report = _report(
        "build-vocab",
        started,
        **stats.to_record(),
        usage=ProviderUsage.from_calls(llm.calls + embedder.calls).to_record(),
    )
    _write_report(paths, "build_vocab", report)
    return report


def stage_gen_candidates(paths: Paths, cfg: PipelineConfig) -> dict:
    started = time.monotonic()
    _require([paths.documents, paths.pairs_init, paths.vocab], "gen-candidates")
    docs = load_documents(paths)
    pairs_init = load_pair_sets(paths.pairs_init)
    vocab = Vocabulary.from_record(load_json(paths.vocab))
    embedder = make_embedding_provider(cfg)
    store = ensure_doc_embeddings(paths, docs, embedder)
    index = build_neighbor_index(store, k=cfg.knn_k)
    save_json(index.to_record(), paths.neighbors)
    cands = build_candidate_sets(
        docs, pairs_init, vocab, index, m=cfg.candidate_m, count_mode=cfg.candidate_count_mode
    )
    save_jsonl((cands[d.doc_id].to_record() for d in docs), paths.candidates)
    sizes_e = [len(cands[d.doc_id].candidate_entities) for d in docs]
    sizes_a = [len(cands[d.doc_id].candidate_aspects) for d in docs]
    report = _report(
        "gen-candidates",
        started,
        docs=len(docs),
        knn_k=cfg.knn_k,
        m=cfg.candidate_m,
        mean_entity_candidates=round(float(np.mean(sizes_e)), 2) if sizes_e else 0,
        mean_aspect_candidates=round(float(np.mean(sizes_a)), 2) if sizes_a else 0,
    )
    _write_report(paths, "gen_candidates", report)
    return report


def stage_soft_labels(paths: Paths, cfg: PipelineConfig) -> dict:
    started = time.monotonic()
    _require([paths.documents, paths.pairs_final, paths.vocab, paths.neighbors], "soft-labels")
    docs = load_documents(paths)
    pairs_final = load_pair_sets(paths.pairs_final)
    vocab = Vocabulary.from_record(load_json(paths.vocab))
    index = NeighborIndex.from_record(load_json(paths.neighbors))
    bm25 = Bm25Index(docs)
    doc_entities = {
        d.doc_id: list(pairs_final[d.doc_id].entities())
        for d in docs
        if d.doc_id in pairs_final and pairs_final[d.doc_id].pairs
    }
    table = soft_labels_for_corpus(
        doc_entities, bm25, index, list(vocab.entities), max_over=cfg.softlabel_max_over
    )
    records = [
        {
            "doc_id": doc_id,
            "labels": {e: round(v, 12) for e, v in sorted(table[doc_id].labels.items())},
        }
        for doc_id in sorted(table)
    ]
    save_jsonl(records, paths.labels)
    report = _report(
        "soft-labels",
        started,
        docs_labeled=len(records),
        max_over=cfg.softlabel_max_over,
    )
    _write_report(paths, "soft_labels", report)
    return report


def _load_label_table(paths: Paths) -> dict[str, dict[str, float]]:
    return {r["doc_id"]: dict(r["labels"]) for r in load_jsonl(paths.labels)}


def stage_train(paths: Paths, cfg: PipelineConfig, target: str) -> dict:
    started = time.monotonic()
    deps = [paths.documents, paths.pairs_final, paths.vocab]
    if target == "entity":
        deps.append(paths.labels)
    _require(deps, f"train --target {target}")
    docs = load_documents(paths)
    pairs_final = load_pair_sets(paths.pairs_final)
    vocab = Vocabulary.from_record(load_json(paths.vocab))
    embedder = make_embedding_provider(cfg)
    doc_store = ensure_doc_embeddings(paths, docs, embedder)
    ent_store = ensure_name_embeddings(
        paths.entity_embeddings, list(vocab.entities), embedder
    )
    paths.models.mkdir(parents=True, exist_ok=True)

    if target == "entity":
        labels = _load_label_table(paths)
        ent_idx = {e: i for i, e in enumerate(vocab.entities)}
        pos_cols, pos_w = [], []
        for d in docs:
            ents = list(pairs_final[d.doc_id].entities()) if d.doc_id in pairs_final else []
            missing = [e for e in ents if e not in labels.get(d.doc_id, {})]
            if missing:
                raise StageError(
                    f"soft labels missing for {d.doc_id!r}: {missing[:3]}"
                )
            pos_cols.append(np.asarray([ent_idx[e] for e in ents], dtype=np.int64))
            pos_w.append(np.asarray([labels[d.doc_id][e] for e in ents], dtype=np.float64))
        result = train_entity_predictor(
            doc_store.matrix, ent_store.matrix, pos_cols, pos_w, cfg.entity_train_config()
        )
        atomic_write_bytes(paths.entity_model, result.model.to_bytes())
        _write_doc_relevance(paths, docs, doc_store, vocab, ent_store, result.model)
        stage_name = "train_entity"
    elif target == "aspect":
        asp_store = ensure_name_embeddings(
            paths.aspect_embeddings, list(vocab.aspects), embedder
        )
        ent_idx = {e: i for i, e in enumerate(vocab.entities)}
        asp_idx = {a: i for i, a in enumerate(vocab.aspects)}
        examples = []
        for di, d in enumerate(docs):
            ps = pairs_final.get(d.doc_id)
            if ps is None:
                continue
            for e in ps.entities():
                cols = np.asarray(
                    sorted({asp_idx[p.aspect] for p in ps.pairs if p.entity == e}),
                    dtype=np.int64,
                )
                examples.append((di, ent_idx[e], cols))
        result = train_aspect_predictor(
            doc_store.matrix,
            ent_store.matrix,
            asp_store.matrix,
            examples,
            cfg.aspect_train_config(),
        )
        atomic_write_bytes(paths.aspect_model, result.model.to_bytes())
        stage_name = "train_aspect"
    else:
        raise StageError(f"unknown train target {target!r}")

    report = _report(
        f"train[{target}]",
        started,
        epochs_run=len(result.epoch_losses) - 1,
        initial_loss=round(result.epoch_losses[0], 6),
        final_loss=round(result.epoch_losses[-1], 6),
        stopped_early=result.stopped_early,
    )
    _write_report(paths, stage_name, report)
    return report


def _write_doc_relevance(
    paths: Paths,
    docs: list[Document],
    doc_store: EmbeddingStore,
    vocab: Vocabulary,
    ent_store: EmbeddingStore,
    model: MlpModel,
) -> None:
    names = list(vocab.entities)
    matrix = ent_store.subset(names)
    records = []
    for d in docs:
        rv = relevance_vector(model, d.doc_id, doc_store.vector(d.doc_id), names, matrix)
        records.append(
            {
                "owner_id": d.doc_id,
                "values": {k: round(v, 12) for k, v in sorted(rv.values.items())},
            }
        )
    save_jsonl(records, paths.relevance)


def document_aspect_ranking(
    doc_emb: np.ndarray,
    entity_model: MlpModel,
    aspect_model: MlpModel,
    vocab: Vocabulary,
    ent_store: EmbeddingStore,
    asp_store: EmbeddingStore,
    top_entities: int = 10,
) -> list[str]:
    """Per-document aspect ranking: best predicted score over the document's
    top predicted entities (mirrors how query pairs are assembled)."""
    names = list(vocab.entities)
    probs = sigmoid(ent_store.subset(names) @ entity_model.forward(doc_emb[None, :])[0])
    order = sorted(range(len(names)), key=lambda i: (-probs[i], names[i]))
    asp_names = list(vocab.aspects)
    asp_matrix = asp_store.subset(asp_names)
    best = np.full(len(asp_names), -np.inf)
    for i in order[:top_entities]:
        x = np.concatenate([doc_emb, ent_store.vector(names[i])])
        best = np.maximum(best, sigmoid(asp_matrix @ aspect_model.forward(x[None, :])[0]))
    ranked = sorted(range(len(asp_names)), key=lambda i: (-best[i], asp_names[i]))
    return [asp_names[i] for i in ranked]


def stage_eval_predictors(paths: Paths, cfg: PipelineConfig) -> dict:
    started = time.monotonic()
    _require(
        [paths.documents, paths.pairs_final, paths.vocab, paths.entity_model, paths.aspect_model],
        "eval-predictors",
    )
    docs = load_documents(paths)
    pairs_final = load_pair_sets(paths.pairs_final)
    vocab = Vocabulary.from_record(load_json(paths.vocab))
    embedder = make_embedding_provider(cfg)
    doc_store = ensure_doc_embeddings(paths, docs, embedder)
    ent_store = ensure_name_embeddings(paths.entity_embeddings, list(vocab.entities), embedder)
    asp_store = ensure_name_embeddings(paths.aspect_embeddings, list(vocab.aspects), embedder)
    with open(paths.entity_model, "rb") as fh:
        ent_model = MlpModel.from_bytes(fh.read())
    with open(paths.aspect_model, "rb") as fh:
        asp_model = MlpModel.from_bytes(fh.read())

    names = list(vocab.entities)
    matrix = ent_store.subset(names)
    ent_p, asp_p = [], []
    for d in docs:
        ps = pairs_final.get(d.doc_id)
        if ps is None or not ps.pairs:
            continue
        rv = relevance_vector(ent_model, d.doc_id, doc_store.vector(d.doc_id), names, matrix)
        ranked = sorted(rv.values, key=lambda e: (-rv.values[e], e))
        ent_p.append(precision_at_k_predictor(ranked, set(ps.entities()), 10))
        asp_ranked = document_aspect_ranking(
            doc_store.vector(d.doc_id), ent_model, asp_model, vocab, ent_store, asp_store
        )
        asp_p.append(precision_at_k_predictor(asp_ranked, set(ps.aspects()), 10))
    report = _report(
        "eval-predictors",
        started,
        entity_p_at_10=round(float(np.mean(ent_p)), 4) if ent_p else 0.0,
        aspect_p_at_10=round(float(np.mean(asp_p)), 4) if asp_p else 0.0,
        documents_evaluated=len(ent_p),
    )
    _write_report(paths, "eval_predictors", report)
    return report


def load_offline_artifacts(paths: Paths, cfg: PipelineConfig, mode: str) -> OfflineArtifacts:
    _require([paths.documents, paths.pairs_final, paths.vocab], "query")
    docs = load_documents(paths)
    vocab = Vocabulary.from_record(load_json(paths.vocab))
    embedder = make_embedding_provider(cfg)
    doc_store = ensure_doc_embeddings(paths, docs, embedder)
    ent_store = ensure_name_embeddings(paths.entity_embeddings, list(vocab.entities), embedder)
    asp_store = ensure_name_embeddings(paths.aspect_embeddings, list(vocab.aspects), embedder)
    doc_pairs = load_pair_sets(paths.pairs_final)

    entity_model = aspect_model = None
    doc_relevance: dict[str, RelevanceVector] = {}
    if mode == MODE_FAST:
        _require(
            [paths.entity_model, paths.aspect_model, paths.relevance],
            "query --mode fast (train first)",
        )
    if paths.entity_model.exists():
        with open(paths.entity_model, "rb") as fh:
            entity_model = MlpModel.from_bytes(fh.read())
    if paths.aspect_model.exists():
        with open(paths.aspect_model, "rb") as fh:
            aspect_model = MlpModel.from_bytes(fh.read())
    if paths.relevance.exists():
        doc_relevance = {
            r["owner_id"]: RelevanceVector.from_record(r)
            for r in load_jsonl(paths.relevance)
        }

    ent_freq: dict[str, int] = {}
    asp_freq: dict[str, int] = {}
    for ps in doc_pairs.values():
        for p in ps.pairs:
            ent_freq[p.entity] = ent_freq.get(p.entity, 0) + 1
            asp_freq[p.aspect] = asp_freq.get(p.aspect, 0) + 1

    return OfflineArtifacts(
        vocab=vocab,
        doc_pairs=doc_pairs,
        doc_store=doc_store,
        entity_store=ent_store,
        aspect_store=asp_store,
        doc_relevance=doc_relevance,
        entity_model=entity_model,
        aspect_model=aspect_model,
        corpus_entity_freq=ent_freq,
        corpus_aspect_freq=asp_freq,
    )


def stage_query(
    paths: Paths,
    cfg: PipelineConfig,
    mode: str,
    k: int = 20,
    pool: int | None = None,
    query_text: str | None = None,
    out_format: str = "tsv",
) -> dict:
    started = time.monotonic()
    inference = cfg.inference_config(mode, pool)
    if k > inference.rerank_pool_size:
        raise StageError(
            f"k={k} exceeds the rerank pool ({inference.rerank_pool_size})"
        )
    arts = load_offline_artifacts(paths, cfg, mode)
    embedder = make_embedding_provider(cfg)
    llm = make_llm_provider(cfg, paths) if mode == MODE_LLM else None

    if query_text is not None:
        query = Query(query_id="adhoc", text=query_text)
        ranking = retrieve(query, arts, inference, embedder=embedder, llm=llm)
        lines = _format_ranking(ranking, k, out_format)
        report = _report(f"query[{mode}]", started, queries=1, k=k)
        report["output"] = lines
        return report

    _require([paths.queries], "query (batch)")
    queries = load_queries(paths)
    paths.runs.mkdir(parents=True, exist_ok=True)
    out_lines: list[str] = []
    for q in queries:
        ranking = retrieve(q, arts, inference, embedder=embedder, llm=llm)
        for rank, entry in enumerate(ranking.entries[:k], start=1):
            out_lines.append(
                f"{q.query_id} {entry.doc_id} {rank} {entry.fused:.6f}"
            )
    atomic_write_text(paths.run_file(mode), "".join(line + "\n" for line in out_lines))
    report = _report(
        f"query[{mode}]",
        started,
        queries=len(queries),
        k=k,
        run_file=str(paths.run_file(mode)),
    )
    _write_report(paths, f"query_{mode}", report)
    return report


def _format_ranking(ranking, k: int, out_format: str) -> list[str]:
    if out_format == "json":
        return [
            dump_json(
                {
                    "doc_id": e.doc_id,
                    "rank": i + 1,
                    "fused": round(e.fused, 6),
                    "sim_base": round(e.sim_base, 6),
                    "sim_pair": round(e.sim_pair, 6),
                    "sim_entity": round(e.sim_entity, 6),
                }
            )
            for i, e in enumerate(ranking.entries[:k])
        ]
    return [
        f"{ranking.query_id}\t{e.doc_id}\t{i + 1}\t{e.fused:.6f}"
        for i, e in enumerate(ranking.entries[:k])
    ]


def read_run_file(path: str | Path) -> dict[str, list[str]]:
    run: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise StageError(f"malformed run line: {line.strip()!r}")
            qid, did, rank, _score = parts
            run.setdefault(qid, []).append((int(rank), did))
    return {qid: [d for _, d in sorted(entries)] for qid, entries in run.items()}


def stage_eval(
    paths: Paths,
    qrels_path: Path,
    run_path: Path,
    metric_spec: str = "ndcg@10,ndcg@20,recall@20,recall@50",
) -> dict:
    started = time.monotonic()
    _require([qrels_path, run_path], "eval")
    qrels = read_qrels(qrels_path)
    run = read_run_file(run_path)
    metrics = parse_metric_spec(metric_spec)
    report_obj = evaluate_run(run, qrels, metrics)
    per_query_lines = ["query_id," + ",".join(f"{n}@{k}" for n, k in metrics)]
    from .evaluation import ndcg_at_k, recall_at_k

    for qid in sorted(run):
        rel = qrels.for_query(qid)
        if not rel:
            continue
        vals = []
        for name, k in metrics:
            fn = ndcg_at_k if name == "ndcg" else recall_at_k
            vals.append(f"{fn(run[qid], rel, k):.6f}")
        per_query_lines.append(f"{qid}," + ",".join(vals))
    paths.reports.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        paths.reports / "eval_per_query.csv", "".join(line + "\n" for line in per_query_lines)
    )
    report = _report("eval", started, **report_obj.to_record(), run=str(run_path))
    _write_report(paths, "eval", report)
    return report


# ---------------------------------------------------------------------------
# stage runner with dependency metadata


def _stage_io(paths: Paths, stage: str, mode: str | None = None):
    table = {
        "synth": ([], [paths.documents, paths.queries, paths.qrels, paths.gold_synonyms]),
        "gen-pairs-zero": ([paths.documents], [paths.pairs_init]),
        "build-vocab": ([paths.pairs_init], [paths.vocab]),
        "gen-candidates": (
            [paths.documents, paths.pairs_init, paths.vocab],
            [paths.candidates, paths.neighbors],
        ),
        "gen-pairs-candidate": (
            [paths.documents, paths.candidates, paths.vocab],
            [paths.pairs_final],
        ),
        "soft-labels": (
            [paths.documents, paths.pairs_final, paths.neighbors],
            [paths.labels],
        ),
        "train-entity": (
            [paths.documents, paths.pairs_final, paths.labels, paths.vocab],
            [paths.entity_model, paths.relevance],
        ),
        "train-aspect": (
            [paths.documents, paths.pairs_final, paths.vocab],
            [paths.aspect_model],
        ),
    }
    return table.get(stage)


def run_stage(
    stage: str,
    workdir: str | Path,
    cfg: PipelineConfig | None = None,
    force: bool = False,
    **kwargs,
) -> dict:
    """Run one pipeline stage with locking and up-to-date short-circuit."""
    paths = Paths(workdir)
    cfg = cfg or PipelineConfig.load(paths.workdir)
    io = _stage_io(paths, stage)
    with WorkdirLock(paths):
        if io is not None and not force and _up_to_date(*io):
            logger.info("stage %s is up to date", stage)
            return {"stage": stage, "status": "up-to-date"}
        if stage == "synth":
            return stage_synth(paths, cfg, kwargs.get("spec"))
        if stage == "gen-pairs-zero":
            return stage_gen_pairs(paths, cfg, MODE_ZERO_SHOT)
        if stage == "gen-pairs-candidate":
            return stage_gen_pairs(paths, cfg, MODE_CANDIDATE)
        if stage == "build-vocab":
            return stage_build_vocab(paths, cfg)
        if stage == "gen-candidates":
            return stage_gen_candidates(paths, cfg)
        if stage == "soft-labels":
            return stage_soft_labels(paths, cfg)
        if stage == "train-entity":
            return stage_train(paths, cfg, "entity")
        if stage == "train-aspect":
            return stage_train(paths, cfg, "aspect")
        if stage == "eval-predictors":
            return stage_eval_predictors(paths, cfg)
        if stage == "query":
            return stage_query(paths, cfg, **kwargs)
        if stage == "eval":
            return stage_eval(
                paths,
                kwargs.get("qrels_path") or paths.qrels,
                kwargs.get("run_path") or paths.run_file(MODE_FAST),
                kwargs.get("metric_spec", "ndcg@10,ndcg@20,recall@20,recall@50"),
            )
        raise StageError(f"unknown stage {stage!r}")


OFFLINE_STAGES = [
    "gen-pairs-zero",
    "build-vocab",
    "gen-candidates",
    "gen-pairs-candidate",
    "soft-labels",
    "train-entity",
    "train-aspect",
]


def run_offline_pipeline(
    workdir: str | Path, cfg: PipelineConfig | None = None, force: bool = False
) -> list[dict]:
    """Run every offline stage in dependency order."""
    return [run_stage(s, workdir, cfg, force=force) for s in OFFLINE_STAGES]


# ---------------------------------------------------------------------------
# hyperparameter sweep


SWEEPABLE = ("M", "N_e", "N_a")


def sweep(
    workdir: str | Path,
    param: str,
    values: list[int],
    cfg: PipelineConfig | None = None,
    mode: str = MODE_FAST,
    metric_spec: str = "ndcg@10",
    k: int = 20,
) -> list[dict]:
    """Re-run the stages depending on one hyperparameter per value.

    N_e / N_a only affect the online stage; M additionally invalidates
    candidates, final pairs, labels, and the trained predictors.
    """
    if param not in SWEEPABLE:
        raise StageError(f"unknown hyperparameter {param!r}; supported: {SWEEPABLE}")
    if not values:
        raise StageError("no sweep values given")
    paths = Paths(workdir)
    cfg = cfg or PipelineConfig.load(paths.workdir)
    rows: list[dict] = []
    for value in values:
        sub = dataclasses.replace(cfg)
        if param == "M":
            sub.candidate_m = int(value)
            for stage in (
                "gen-candidates",
                "gen-pairs-candidate",
                "soft-labels",
                "train-entity",
                "train-aspect",
            ):
                run_stage(stage, workdir, sub, force=True)
        elif param == "N_e":
            sub.n_entities_query = int(value)
        else:
            sub.n_aspects_query = int(value)
        run_stage("query", workdir, sub, force=True, mode=mode, k=k)
        report = run_stage(
            "eval",
            workdir,
            sub,
            force=True,
            run_path=paths.run_file(mode),
            metric_spec=metric_spec,
        )
        rows.append({"param": param, "value": value, "metrics": report["metrics"]})
    _write_report(paths, f"sweep_{param}", {"rows": rows})
    return rows


def collect_reports(workdir: str | Path) -> dict:
    paths = Paths(workdir)
    out = {}
    if paths.reports.exists():
        for p in sorted(paths.reports.glob("*.json")):
            out[p.stem] = load_json(p)
    return out
