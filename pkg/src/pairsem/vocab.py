"""Entity/aspect set construction: clustering and synonym merging.

Surfaces are embedded, L2-normalized, and clustered with Ward linkage
(Euclidean distance). The size cap is enforced by splitting the merge tree
top-down rather than by thresholding distances, which guarantees every
emitted cluster stays within the cap. Synonym merging inside each cluster
is delegated to the LLM and fails open: if the model's output cannot be
parsed, every member becomes its own singleton.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import PairSet, Vocabulary
from .pairgen import parse_synonym_xml, render_cluster_prompt
from .providers import EmbeddingProvider, LlmProvider, ProviderError

logger = logging.getLogger(__name__)

DEFAULT_MAX_CLUSTER_SIZE = 20


@dataclass(frozen=True)
class Cluster:
    members: tuple[str, ...]
    centroid: np.ndarray

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster must have at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError("cluster members must be unique")


@dataclass(frozen=True)
class SynonymSet:
    surfaces: tuple[str, ...]
    representative: str

    def __post_init__(self) -> None:
        if not self.surfaces:
            raise ValueError("synonym set must have at least one surface")
        if len(set(self.surfaces)) != len(self.surfaces):
            raise ValueError("synonym surfaces must be distinct")
        if not self.representative:
            raise ValueError("representative must be non-empty")


def collect_initial_sets(pairs: dict[str, PairSet]) -> tuple[set[str], set[str]]:
    """Union of entities and aspects over all per-document pair sets."""
    if not pairs:
        raise ValueError("no pair sets given")
    entities: set[str] = set()
    aspects: set[str] = set()
    for ps in pairs.values():
        for p in ps.pairs:
            entities.add(p.entity)
            aspects.add(p.aspect)
    if not entities or not aspects:
        raise ValueError("all pair sets are empty; cannot build a vocabulary")
    return entities, aspects


def ward_linkage(points: np.ndarray) -> np.ndarray:
    """Linkage rows [id_a, id_b, distance, size] over observation vectors."""
    d2 = kernels.squared_distances(points)
    return kernels.nn_chain_ward(d2)


def _cap_partition(linkage: np.ndarray, n: int, max_size: int) -> list[list[int]]:
    """Split the merge tree top-down until every block is within max_size."""
    if n == 1:
        return [[0]]

    def leaves(node: int) -> list[int]:
        out: list[int] = []
        stack = [node]
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                row = linkage[cur - n]
                stack.append(int(row[1]))
                stack.append(int(row[0]))
        return sorted(out)

    def size(node: int) -> int:
        return 1 if node < n else int(linkage[node - n][3])

    blocks: list[list[int]] = []
    stack = [2 * n - 2]
    while stack:
        node = stack.pop()
        if size(node) <= max_size:
            blocks.append(leaves(node))
        else:
            row = linkage[node - n]
            stack.append(int(row[1]))
            stack.append(int(row[0]))
    blocks.sort(key=lambda block: block[0])
    return blocks


def agglomerative_cluster(
    items: list[str],
    embedder: EmbeddingProvider,
    max_size: int = DEFAULT_MAX_CLUSTER_SIZE,
) -> list[Cluster]:
    """Partition surface strings into clusters of at most max_size.

    Items are deduplicated and sorted first, so merge-order ties resolve
    toward the lexicographically smallest member.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    uniq = sorted(dict.fromkeys(items))
    if not uniq:
        raise ValueError("no items to cluster")
    emb = embedder.embed(uniq)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    emb = emb / norms
    if len(uniq) == 1:
        return [Cluster(members=(uniq[0],), centroid=emb[0])]
    linkage = ward_linkage(emb)
    blocks = _cap_partition(linkage, len(uniq), max_size)
    clusters = []
    for block in blocks:
        members = tuple(uniq[i] for i in block)
        clusters.append(Cluster(members=members, centroid=emb[block].mean(axis=0)))
    return clusters


def merge_cluster_synonyms(
    cluster: Cluster, llm: LlmProvider | None, stats: "VocabStats | None" = None
) -> list[SynonymSet]:
    """Ask the LLM to group a cluster's members into synonym sets.

    Members the model never mentions become their own singletons; surfaces
    the model invents are ignored. Singleton clusters skip the call.
    """
    members = list(cluster.members)
    if len(members) == 1:
        return [SynonymSet(surfaces=(members[0],), representative=members[0])]
    if llm is None:
        raise ValueError("multi-member cluster requires an LLM provider")
    try:
        completion = llm.generate(render_cluster_prompt(members))
        groups, malformed = parse_synonym_xml(completion)
        if malformed:
            logger.warning("synonym merge: %d malformed <set> fragments", malformed)
        if not groups:
            logger.warning(
                "synonym merge returned nothing parseable for a %d-member cluster; "
                "falling back to singletons",
                len(members),
            )
            if stats is not None:
                stats.fail_open_clusters += 1
    except ProviderError as exc:
        logger.warning("synonym merge failed (%s); falling back to singletons", exc)
        if stats is not None:
            stats.fail_open_clusters += 1
        groups = []

    member_set = set(members)
    assigned: set[str] = set()
    out: list[SynonymSet] = []
    for surfaces, rep in groups:
        kept = tuple(s for s in surfaces if s in member_set and s not in assigned)
        if not kept:
            continue
        assigned.update(kept)
        out.append(SynonymSet(surfaces=kept, representative=rep))
    for m in members:
        if m not in assigned:
            out.append(SynonymSet(surfaces=(m,), representative=m))
    return out


def _resolve_map(raw: dict[str, str]) -> dict[str, str]:
    """Path-compress surface->rep chains; cycles collapse to their smallest member."""
    resolved: dict[str, str] = {}

    def chase(start: str) -> str:
        path = [start]
        seen = {start}
        cur = start
        while True:
            nxt = raw.get(cur, cur)
            if nxt == cur:
                return cur
            if nxt in seen:  # cycle
                cycle_start = path.index(nxt)
                return min(path[cycle_start:])
            path.append(nxt)
            seen.add(nxt)
            cur = nxt

    for surface in raw:
        resolved[surface] = chase(surface)
    return resolved


@dataclass
class VocabStats:
    entities_initial: int = 0
    entities_final: int = 0
    aspects_initial: int = 0
    aspects_final: int = 0
    entity_cluster_sizes: dict[int, int] = field(default_factory=dict)
    aspect_cluster_sizes: dict[int, int] = field(default_factory=dict)
    representative_collisions: int = 0
    fail_open_clusters: int = 0

    def to_record(self) -> dict:
        return {
            "entities_initial": self.entities_initial,
            "entities_final": self.entities_final,
            "aspects_initial": self.aspects_initial,
            "aspects_final": self.aspects_final,
            "entity_cluster_sizes": {str(k): v for k, v in sorted(self.entity_cluster_sizes.items())},
            "aspect_cluster_sizes": {str(k): v for k, v in sorted(self.aspect_cluster_sizes.items())},
            "representative_collisions": self.representative_collisions,
            "fail_open_clusters": self.fail_open_clusters,
        }


def _build_side(
    surfaces: set[str],
    embedder: EmbeddingProvider,
    llm: LlmProvider,
    max_cluster_size: int,
    stats: VocabStats,
    size_hist: dict[int, int],
) -> tuple[tuple[str, ...], dict[str, str]]:
    clusters = agglomerative_cluster(sorted(surfaces), embedder, max_cluster_size)
    raw_map: dict[str, str] = {}
    n_sets = 0
    reps: set[str] = set()
    for cluster in clusters:
        size_hist[len(cluster.members)] = size_hist.get(len(cluster.members), 0) + 1
        for syn in merge_cluster_synonyms(cluster, llm, stats):
            n_sets += 1
            reps.add(syn.representative)
            for s in syn.surfaces:
                raw_map[s] = syn.representative
    stats.representative_collisions += n_sets - len(reps)
    resolved = _resolve_map(raw_map)
    canon = sorted(set(resolved.values()))
    # identity entries keep the map idempotent and total over representatives
    mapping = dict(resolved)
    for rep in canon:
        mapping[rep] = rep
    return tuple(canon), mapping


def build_vocabulary(
    entity_surfaces: set[str],
    aspect_surfaces: set[str],
    embedder: EmbeddingProvider,
    llm: LlmProvider,
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE,
) -> tuple[Vocabulary, VocabStats]:
    """Cluster both surface sets and merge synonyms into canonical sets."""
    if not entity_surfaces or not aspect_surfaces:
        raise ValueError("initial entity and aspect sets must be non-empty")
    stats = VocabStats(
        entities_initial=len(entity_surfaces), aspects_initial=len(aspect_surfaces)
    )
    entities, entity_map = _build_side(
        entity_surfaces, embedder, llm, max_cluster_size, stats, stats.entity_cluster_sizes
    )
    aspects, aspect_map = _build_side(
        aspect_surfaces, embedder, llm, max_cluster_size, stats, stats.aspect_cluster_sizes
    )
    stats.entities_final = len(entities)
    stats.aspects_final = len(aspects)
    vocab = Vocabulary(
        entities=entities,
        aspects=aspects,
        entity_map=entity_map,
        aspect_map=aspect_map,
    )
    return vocab, stats
