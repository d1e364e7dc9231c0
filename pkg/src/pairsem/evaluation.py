"""Retrieval metrics (binary relevance) and predictor precision."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Qrels:
    relevant: dict[str, set[str]]  # query_id -> relevant doc ids

    def __post_init__(self) -> None:
        for qid, docs in self.relevant.items():
            if not isinstance(docs, set):
                raise TypeError(f"qrels for {qid!r} must be a set")

    def for_query(self, query_id: str) -> set[str]:
        return self.relevant.get(query_id, set())


def ndcg_at_k(ranking: list[str], relevant: set[str], k: int) -> float:
    """Binary-gain NDCG with log2 discount: DCG@k / IDCG@k, in [0, 1]."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("NDCG undefined for a query with no relevant documents")
    dcg = 0.0
    for i, doc in enumerate(ranking[:k], start=1):
        if doc in relevant:
            dcg += 1.0 / math.log2(i + 1)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


def recall_at_k(ranking: list[str], relevant: set[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("recall undefined for a query with no relevant documents")
    hits = sum(1 for doc in ranking[:k] if doc in relevant)
    return hits / len(relevant)


def precision_at_k_predictor(ranking: list[str], gold: set[str], k: int = 10) -> float:
    """Fraction of the top-k predicted names that are in the gold set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for name in ranking[:k] if name in gold)
    return hits / k


@dataclass
class MetricReport:
    values: dict[str, float]  # metric name -> macro mean
    evaluated_queries: int
    skipped_queries: int  # queries with no relevant documents

    def to_record(self) -> dict:
        return {
            "metrics": {k: round(v, 6) for k, v in sorted(self.values.items())},
            "evaluated_queries": self.evaluated_queries,
            "skipped_queries": self.skipped_queries,
        }


def parse_metric_spec(spec: str) -> list[tuple[str, int]]:
    """Parse "ndcg@10,recall@20" into [("ndcg", 10), ("recall", 20)]."""
    out = []
    for part in spec.split(","):
        part = part.strip().lower()
        if not part:
            continue
        name, _, depth = part.partition("@")
        if name not in ("ndcg", "recall") or not depth.isdigit():
            raise ValueError(f"unknown metric {part!r}")
        out.append((name, int(depth)))
    if not out:
        raise ValueError("no metrics requested")
    return out


def evaluate_run(
    run: dict[str, list[str]],
    qrels: Qrels,
    metrics: list[tuple[str, int]],
) -> MetricReport:
    """Macro-average metrics over queries; queries without relevant docs are
    excluded from the mean and counted separately."""
    sums = {f"{name}@{k}": 0.0 for name, k in metrics}
    evaluated = 0
    skipped = 0
    for qid, ranking in sorted(run.items()):
        relevant = qrels.for_query(qid)
        if not relevant:
            skipped += 1
            continue
        evaluated += 1
        for name, k in metrics:
            fn = ndcg_at_k if name == "ndcg" else recall_at_k
            sums[f"{name}@{k}"] += fn(ranking, relevant, k)
    values = {
        key: (total / evaluated if evaluated else 0.0) for key, total in sums.items()
    }
    return MetricReport(
        values=values, evaluated_queries=evaluated, skipped_queries=skipped
    )
