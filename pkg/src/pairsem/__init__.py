"""Pairwise semantic matching for scientific document retrieval.

Offline: generate (entity, aspect) pairs per document, merge synonyms into
canonical sets, re-generate grounded on per-document candidates, train
lightweight entity/aspect relevance predictors. Online: build query pairs
(via LLM or the predictors) and rerank a dense retriever's pool with
reciprocal-rank fusion of base, pair, and entity-relevance scores.
"""
from .model import (
    CandidateSets,
    Document,
    PairSet,
    Query,
    RelevanceVector,
    SemanticPair,
    Vocabulary,
    normalize_surface,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSets",
    "Document",
    "PairSet",
    "Query",
    "RelevanceVector",
    "SemanticPair",
    "Vocabulary",
    "normalize_surface",
    "__version__",
]
