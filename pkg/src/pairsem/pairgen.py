"""Prompt construction and structured-output parsing for pair generation.

Parsing is regex based and tolerant of surrounding prose: models violate
"output only" instructions often enough that a strict XML parser would
reject usable completions. Malformed fragments are skipped and counted,
never raised.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .model import (
    CandidateSets,
    Document,
    PairSet,
    SemanticPair,
    STAGE_FINAL,
    STAGE_INITIAL,
    Vocabulary,
    make_pair_set,
)
from .providers import LlmProvider, LlmRequest, ProviderError, approx_tokens

logger = logging.getLogger(__name__)

MODE_ZERO_SHOT = "zero_shot"
MODE_CANDIDATE = "candidate_augmented"

PAIR_INSTRUCTION = (
    "Given a scientific document, identify all scientific entities. "
    "Then, for each entity, find all associated aspects and generate "
    "(entity, aspect) pairs"
)
PAIR_FORMAT = (
    "Output only (entity, aspect) pairs using the following XML structure "
    "for each pair: <pair><entity>entity name</entity>"
    "<aspect>aspect phrase</aspect></pair>"
)
CANDIDATE_PAIR_INSTRUCTION = (
    "Given a scientific document, find all relevant entities from "
    "{candidate_entities}. Then, for each entity, find all associated "
    "aspects from {candidate_aspects}, and generate relevant "
    "(entity, aspect) pairs"
)
CLUSTER_INSTRUCTION = (
    "Given a list of scientific entities, find sets of synonyms that "
    "describe the same academic concept. Then, for each synonym set, "
    "generate a representative entity."
)
SET_FORMAT = (
    "Output synonyms and representatives using the following XML structure "
    "for each set: <set><entities>entity1, entity2,...</entities>"
    "<rep>representative entity</rep></set>"
)

KIND_PAIR = "pair"
KIND_PAIR_WITH_CANDIDATES = "pair_with_candidates"
KIND_CLUSTER_MERGE = "cluster_merge"

_REQUIRED_PLACEHOLDERS = {
    KIND_PAIR: ("{document}",),
    KIND_PAIR_WITH_CANDIDATES: (
        "{document}",
        "{candidate_entities}",
        "{candidate_aspects}",
    ),
    KIND_CLUSTER_MERGE: ("{cluster_items}",),
}


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction/content split of one prompt kind.

    ``system_body`` and ``user_body`` together form the prompt body; the
    required placeholders for the kind must appear exactly once across the
    two. Pair templates carry the pair format instruction, cluster templates
    the synonym-set format instruction.
    """

    kind: str
    system_body: str
    user_body: str

    def __post_init__(self) -> None:
        if self.kind not in _REQUIRED_PLACEHOLDERS:
            raise ValueError(f"unknown template kind {self.kind!r}")
        joined = self.system_body + "\n" + self.user_body
        for ph in _REQUIRED_PLACEHOLDERS[self.kind]:
            if joined.count(ph) != 1:
                raise ValueError(
                    f"{self.kind} template must contain {ph} exactly once"
                )
        fmt = SET_FORMAT if self.kind == KIND_CLUSTER_MERGE else PAIR_FORMAT
        if fmt not in joined:
            raise ValueError(f"{self.kind} template is missing its format instruction")


DEFAULT_PAIR_TEMPLATE = PromptTemplate(
    kind=KIND_PAIR,
    system_body=PAIR_INSTRUCTION + "\n" + PAIR_FORMAT,
    user_body="{document}",
)
DEFAULT_CANDIDATE_TEMPLATE = PromptTemplate(
    kind=KIND_PAIR_WITH_CANDIDATES,
    system_body=CANDIDATE_PAIR_INSTRUCTION + "\n" + PAIR_FORMAT,
    user_body="{document}",
)
DEFAULT_CLUSTER_TEMPLATE = PromptTemplate(
    kind=KIND_CLUSTER_MERGE,
    system_body=CLUSTER_INSTRUCTION + "\n" + SET_FORMAT,
    user_body="{cluster_items}",
)


def _truncate_candidates(values: tuple[str, ...], budget: int, label: str) -> str:
    """Comma-join candidates, truncating to a prefix that fits the budget."""
    joined = ", ".join(values)
    if approx_tokens(joined) <= budget:
        return joined
    kept: list[str] = []
    used = 0
    for v in values:
        t = approx_tokens(v)
        if used + t > budget:
            break
        kept.append(v)
        used += t
    logger.warning(
        "%s list exceeds token budget (%d); truncated %d -> %d entries",
        label,
        budget,
        len(values),
        len(kept),
    )
    return ", ".join(kept)


def render_pair_prompt(
    doc: Document,
    candidates: CandidateSets | None = None,
    temperature: float = 0.0,
    max_tokens: int = 2048,
    template: PromptTemplate | None = None,
) -> LlmRequest:
    """Build the generation request for one document.

    Without candidates this is the zero-shot prompt; with candidates the
    instruction embeds both candidate lists comma-separated in stored order.
    Candidate lists longer than the max_tokens budget are truncated to a
    prefix with a warning.
    """
    if candidates is None:
        tpl = template or DEFAULT_PAIR_TEMPLATE
        system = tpl.system_body
        user = tpl.user_body.format(document=doc.text)
    else:
        if not candidates.candidate_entities or not candidates.candidate_aspects:
            raise ValueError(
                f"candidate sets for {doc.doc_id!r} must be non-empty on both sides"
            )
        tpl = template or DEFAULT_CANDIDATE_TEMPLATE
        ents = _truncate_candidates(
            candidates.candidate_entities, max_tokens, "candidate entity"
        )
        asps = _truncate_candidates(
            candidates.candidate_aspects, max_tokens, "candidate aspect"
        )
        system = tpl.system_body.format(
            candidate_entities=ents, candidate_aspects=asps
        )
        user = tpl.user_body.format(document=doc.text)
    return LlmRequest(
        system_prompt=system,
        user_content=user,
        temperature=temperature,
        max_tokens=max_tokens,
    )


def render_cluster_prompt(
    members: list[str],
    temperature: float = 0.0,
    max_tokens: int = 2048,
    template: PromptTemplate | None = None,
) -> LlmRequest:
    if not members:
        raise ValueError("cluster must have at least one member")
    tpl = template or DEFAULT_CLUSTER_TEMPLATE
    return LlmRequest(
        system_prompt=tpl.system_body,
        user_content=tpl.user_body.format(cluster_items=", ".join(members)),
        temperature=temperature,
        max_tokens=max_tokens,
    )


_PAIR_BLOCK_RE = re.compile(
    r"<pair>\s*<entity>(.*?)</entity>\s*<aspect>(.*?)</aspect>\s*</pair>",
    re.DOTALL,
)
_SET_BLOCK_RE = re.compile(
    r"<set>\s*<entities>(.*?)</entities>\s*<rep>(.*?)</rep>\s*</set>",
    re.DOTALL,
)


@dataclass
class PairParseResult:
    pairs: list[SemanticPair]
    malformed_count: int
    empty_extraction: bool


def parse_pair_xml(text: str) -> PairParseResult:
    """Extract well-formed ``<pair>`` elements from arbitrary completion text.

    Never raises. Duplicates are removed preserving first occurrence;
    fragments that do not parse (or normalize to empty) count as malformed.
    """
    opened = text.count("<pair>")
    pairs: list[SemanticPair] = []
    seen: set[SemanticPair] = set()
    well_formed = 0
    for ent, asp in _PAIR_BLOCK_RE.findall(text):
        try:
            pair = SemanticPair(entity=ent, aspect=asp)
        except ValueError:
            continue
        well_formed += 1
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    malformed = max(opened - well_formed, 0)
    return PairParseResult(
        pairs=pairs,
        malformed_count=malformed,
        empty_extraction=bool(text.strip()) and not pairs,
    )


def parse_synonym_xml(text: str) -> tuple[list[tuple[list[str], str]], int]:
    """Extract ``<set>`` elements as (surfaces, representative) tuples."""
    opened = text.count("<set>")
    out: list[tuple[list[str], str]] = []
    well_formed = 0
    for raw_members, raw_rep in _SET_BLOCK_RE.findall(text):
        from .model import normalize_surface

        rep = normalize_surface(raw_rep)
        members = [normalize_surface(m) for m in raw_members.split(",")]
        members = [m for m in dict.fromkeys(members) if m]
        if not rep or not members:
            continue
        well_formed += 1
        out.append((members, rep))
    return out, max(opened - well_formed, 0)


def render_pairs_xml(pairs) -> str:
    """Serialize pairs in the format the parser accepts (round-trip aid)."""
    return "\n".join(
        f"<pair><entity>{p.entity}</entity><aspect>{p.aspect}</aspect></pair>"
        for p in pairs
    )


@dataclass
class GenStats:
    """Per-run summary for the generation stage report."""

    docs: int = 0
    total_pairs: int = 0
    failed_doc_ids: list[str] = field(default_factory=list)
    empty_doc_ids: list[str] = field(default_factory=list)
    retries: int = 0
    malformed_fragments: int = 0
    unknown_entities_dropped: int = 0
    unknown_aspects_dropped: int = 0

    @property
    def pairs_per_doc(self) -> float:
        return self.total_pairs / self.docs if self.docs else 0.0

    def to_record(self) -> dict:
        return {
            "docs": self.docs,
            "total_pairs": self.total_pairs,
            "pairs_per_doc": round(self.pairs_per_doc, 4),
            "failures": len(self.failed_doc_ids),
            "failed_doc_ids": sorted(self.failed_doc_ids),
            "empty_doc_ids": sorted(self.empty_doc_ids),
            "retries": self.retries,
            "malformed_fragments": self.malformed_fragments,
            "unknown_entities_dropped": self.unknown_entities_dropped,
            "unknown_aspects_dropped": self.unknown_aspects_dropped,
        }


def _canonicalize_pairs(
    pairs: list[SemanticPair], vocab: Vocabulary, stats: GenStats
) -> list[SemanticPair]:
    out: list[SemanticPair] = []
    for p in pairs:
        ent = vocab.canon_entity(p.entity)
        asp = vocab.canon_aspect(p.aspect)
        if ent is None:
            stats.unknown_entities_dropped += 1
            continue
        if asp is None:
            stats.unknown_aspects_dropped += 1
            continue
        out.append(SemanticPair(entity=ent, aspect=asp))
    return out


def generate_pairs_for_document(
    doc: Document,
    llm: LlmProvider,
    candidates: CandidateSets | None,
    stats: GenStats,
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> list[SemanticPair]:
    req = render_pair_prompt(
        doc, candidates, temperature=temperature, max_tokens=max_tokens
    )
    result = parse_pair_xml(llm.generate(req))
    stats.malformed_fragments += result.malformed_count
    if not result.pairs:
        # one retry, then record an empty set
        stats.retries += 1
        result = parse_pair_xml(llm.generate(req))
        stats.malformed_fragments += result.malformed_count
    return result.pairs


def generate_pairs_for_corpus(
    docs: list[Document],
    llm: LlmProvider,
    mode: str,
    candidates: dict[str, CandidateSets] | None = None,
    vocab: Vocabulary | None = None,
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> tuple[dict[str, PairSet], GenStats]:
    """Run pair generation over a corpus; one PairSet per document.

    In candidate-augmented mode every surface is mapped through the
    vocabulary; surfaces that stay unknown are dropped and counted. Provider
    failures are recorded per document and the run continues.
    """
    if mode not in (MODE_ZERO_SHOT, MODE_CANDIDATE):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == MODE_CANDIDATE:
        if vocab is None:
            raise ValueError("candidate_augmented mode requires a vocabulary")
        missing = [d.doc_id for d in docs if candidates is None or d.doc_id not in candidates]
        if missing:
            raise ValueError(
                f"candidate sets missing for {len(missing)} documents, "
                f"first: {missing[:3]}"
            )

    stats = GenStats()
    results: dict[str, PairSet] = {}
    for doc in docs:
        stats.docs += 1
        cand = candidates[doc.doc_id] if mode == MODE_CANDIDATE else None
        try:
            pairs = generate_pairs_for_document(
                doc, llm, cand, stats, temperature=temperature, max_tokens=max_tokens
            )
        except ProviderError as exc:
            logger.error("pair generation failed for %s: %s", doc.doc_id, exc)
            stats.failed_doc_ids.append(doc.doc_id)
            continue
        if mode == MODE_CANDIDATE:
            pairs = _canonicalize_pairs(pairs, vocab, stats)
            stage = STAGE_FINAL
        else:
            stage = STAGE_INITIAL
        if not pairs:
            stats.empty_doc_ids.append(doc.doc_id)
        pair_set = make_pair_set(doc.doc_id, pairs, stage)
        stats.total_pairs += len(pair_set)
        results[doc.doc_id] = pair_set
    return results, stats
