"""Domain types shared by every pipeline stage.

All types are immutable after construction and safe to share across
threads. String fields that participate in matching or deduplication are
canonicalized through :func:`normalize_surface` at construction time.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

_WS_RE = re.compile(r"\s+")

STAGE_INITIAL = "initial"
STAGE_FINAL = "final"
_STAGES = (STAGE_INITIAL, STAGE_FINAL)


def normalize_surface(s: str) -> str:
    """Lowercase, collapse interior whitespace, strip. Idempotent."""
    return _WS_RE.sub(" ", s).strip().lower()


def _check_embedding(vec: np.ndarray | None) -> np.ndarray | None:
    if vec is None:
        return None
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class Document:
    doc_id: str
    text: str
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.text:
            raise ValueError(f"document {self.doc_id!r} has empty text")
        object.__setattr__(self, "embedding", _check_embedding(self.embedding))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Document):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.text == other.text
            and _emb_equal(self.embedding, other.embedding)
        )

    def to_record(self) -> dict:
        return {"doc_id": self.doc_id, "text": self.text}

    @classmethod
    def from_record(cls, rec: dict) -> "Document":
        return cls(doc_id=rec["doc_id"], text=rec["text"])


@dataclass(frozen=True, eq=False)
class Query:
    query_id: str
    text: str
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.query_id:
            raise ValueError("query_id must be non-empty")
        if not self.text:
            raise ValueError(f"query {self.query_id!r} has empty text")
        object.__setattr__(self, "embedding", _check_embedding(self.embedding))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.text == other.text
            and _emb_equal(self.embedding, other.embedding)
        )

    def to_record(self) -> dict:
        return {"query_id": self.query_id, "text": self.text}

    @classmethod
    def from_record(cls, rec: dict) -> "Query":
        return cls(query_id=rec["query_id"], text=rec["text"])


def _emb_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, order=True)
class SemanticPair:
    """One (entity, aspect) unit. Both sides are stored canonicalized."""

    entity: str
    aspect: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "entity", normalize_surface(self.entity))
        object.__setattr__(self, "aspect", normalize_surface(self.aspect))
        if not self.entity or not self.aspect:
            raise ValueError("entity and aspect must be non-empty after normalization")

    def to_record(self) -> dict:
        return {"entity": self.entity, "aspect": self.aspect}

    @classmethod
    def from_record(cls, rec: dict) -> "SemanticPair":
        return cls(entity=rec["entity"], aspect=rec["aspect"])


@dataclass(frozen=True)
class PairSet:
    """Ordered, duplicate-free pairs attached to one document or query."""

    owner_id: str
    pairs: tuple[SemanticPair, ...]
    stage: str

    def __post_init__(self) -> None:
        if not self.owner_id:
            raise ValueError("owner_id must be non-empty")
        if self.stage not in _STAGES:
            raise ValueError(f"stage must be one of {_STAGES}, got {self.stage!r}")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError(f"duplicate pairs in PairSet for {self.owner_id!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def entities(self) -> tuple[str, ...]:
        """Unique entities in first-occurrence order."""
        return tuple(dict.fromkeys(p.entity for p in self.pairs))

    def aspects(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(p.aspect for p in self.pairs))

    def to_record(self) -> dict:
        return {
            "owner_id": self.owner_id,
            "stage": self.stage,
            "pairs": [p.to_record() for p in self.pairs],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PairSet":
        return cls(
            owner_id=rec["owner_id"],
            pairs=tuple(SemanticPair.from_record(p) for p in rec["pairs"]),
            stage=rec["stage"],
        )


def make_pair_set(owner_id: str, pairs, stage: str) -> PairSet:
    """Build a PairSet, dropping duplicates while preserving first occurrence."""
    return PairSet(owner_id=owner_id, pairs=tuple(dict.fromkeys(pairs)), stage=stage)


@dataclass(frozen=True)
class Vocabulary:
    """Merged entity/aspect sets with surface-to-representative maps.

    Both maps are total over the surfaces observed during construction and
    idempotent: every representative maps to itself.
    """

    entities: tuple[str, ...]
    aspects: tuple[str, ...]
    entity_map: dict[str, str]
    aspect_map: dict[str, str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(sorted(set(self.entities))))
        object.__setattr__(self, "aspects", tuple(sorted(set(self.aspects))))
        self._check_map("entity_map", self.entity_map, set(self.entities))
        self._check_map("aspect_map", self.aspect_map, set(self.aspects))

    @staticmethod
    def _check_map(name: str, mapping: dict[str, str], canon: set[str]) -> None:
        for surface, rep in mapping.items():
            if rep not in canon:
                raise ValueError(f"{name}[{surface!r}] = {rep!r} is not canonical")
            if mapping.get(rep, rep) != rep:
                raise ValueError(f"{name} is not idempotent at {rep!r}")

    def canon_entity(self, surface: str) -> str | None:
        """Map a surface to its representative, or None if never observed."""
        s = normalize_surface(surface)
        rep = self.entity_map.get(s)
        if rep is not None:
            return rep
        return s if s in set(self.entities) else None

    def canon_aspect(self, surface: str) -> str | None:
        s = normalize_surface(surface)
        rep = self.aspect_map.get(s)
        if rep is not None:
            return rep
        return s if s in set(self.aspects) else None

    def to_record(self) -> dict:
        return {
            "entities": list(self.entities),
            "aspects": list(self.aspects),
            "entity_map": dict(sorted(self.entity_map.items())),
            "aspect_map": dict(sorted(self.aspect_map.items())),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Vocabulary":
        return cls(
            entities=tuple(rec["entities"]),
            aspects=tuple(rec["aspects"]),
            entity_map=dict(rec["entity_map"]),
            aspect_map=dict(rec["aspect_map"]),
        )


@dataclass(frozen=True)
class CandidateSets:
    """Per-document candidate entities/aspects, canonical, at most M each."""

    doc_id: str
    candidate_entities: tuple[str, ...]
    candidate_aspects: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidate_entities", tuple(self.candidate_entities))
        object.__setattr__(self, "candidate_aspects", tuple(self.candidate_aspects))
        for name, vals in (
            ("candidate_entities", self.candidate_entities),
            ("candidate_aspects", self.candidate_aspects),
        ):
            if len(set(vals)) != len(vals):
                raise ValueError(f"{name} for {self.doc_id!r} contains duplicates")

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "candidate_entities": list(self.candidate_entities),
            "candidate_aspects": list(self.candidate_aspects),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CandidateSets":
        return cls(
            doc_id=rec["doc_id"],
            candidate_entities=tuple(rec["candidate_entities"]),
            candidate_aspects=tuple(rec["candidate_aspects"]),
        )


@dataclass(frozen=True)
class RelevanceVector:
    """Sigmoid relevance scores over the canonical entity set for one owner."""

    owner_id: str
    values: dict[str, float]

    def __post_init__(self) -> None:
        for key, v in self.values.items():
            if not (0.0 < v < 1.0):
                raise ValueError(
                    f"relevance[{key!r}] = {v} outside the open interval (0, 1)"
                )

    def to_record(self) -> dict:
        return {"owner_id": self.owner_id, "values": dict(sorted(self.values.items()))}

    @classmethod
    def from_record(cls, rec: dict) -> "RelevanceVector":
        return cls(owner_id=rec["owner_id"], values=dict(rec["values"]))
