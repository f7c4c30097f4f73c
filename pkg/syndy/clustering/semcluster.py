"""
Threshold-graph clustering of claim embeddings.

Two claims share an edge when their cosine similarity is strictly above tau;
clusters are the connected components of that graph. Components may chain:
members of one cluster need not be pairwise similar above tau.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.metrics.pairwise import cosine_similarity

from syndy.common.errors import ValidationError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import sort_key
from syndy.common.types import (
    ClaimTuple,
    ClusterAssignment,
    ClusterConfig,
    ClusterRecord,
    EmbeddingVector,
    RelationTuple,
    RepresentativeRule,
    RewriteStats,
)
from syndy.integration.embeddings import Embedder

logger = get_logger(__name__)

# score difference below which two medoid candidates count as tied
_TIE_TOLERANCE = 1e-12


def embed_all(texts: Sequence[str], embedder: Embedder) -> List[EmbeddingVector]:
    return embedder.embed_all(texts)


def _as_matrix(embeddings: Sequence[EmbeddingVector]) -> np.ndarray:
    dims = {e.dim for e in embeddings} | {len(e.values) for e in embeddings}
    if len(dims) != 1:
        raise ValidationError(f"embedding dimension mismatch: {sorted(dims)}")
    return np.asarray([e.values for e in embeddings], dtype=np.float64)


def threshold_components(similarity: np.ndarray, tau: float) -> np.ndarray:
    """Component label per row, numbered in order of each component's smallest index."""
    # rounding can push self-similarity past 1.0
    adjacency = np.clip(similarity, -1.0, 1.0) > tau
    np.fill_diagonal(adjacency, False)
    _, labels = connected_components(csr_matrix(adjacency), directed=False)
    remap: Dict[int, int] = {}
    for label in labels:
        remap.setdefault(int(label), len(remap))
    return np.asarray([remap[int(label)] for label in labels], dtype=int)


def pick_representative(
    members: Sequence[str],
    vectors: Dict[str, np.ndarray],
    rule: RepresentativeRule = RepresentativeRule.MEDOID,
) -> str:
    """Medoid: the member with the largest summed cosine similarity to the others; ties go to the smaller id."""
    if not members:
        raise ValidationError("cannot pick a representative of an empty cluster")
    if rule != RepresentativeRule.MEDOID:
        raise ValidationError(f"unknown representative rule {rule}")
    ordered = sorted(members)
    if len(ordered) == 1:
        return ordered[0]
    matrix = np.asarray([vectors[m] for m in ordered], dtype=np.float64)
    sims = cosine_similarity(matrix)
    np.fill_diagonal(sims, 0.0)
    scores = sims.sum(axis=1)
    best = scores.max()
    return next(m for m, s in zip(ordered, scores) if s >= best - _TIE_TOLERANCE)


def cluster(
    embeddings: Sequence[EmbeddingVector],
    cfg: Optional[ClusterConfig] = None,
    claim_ids: Optional[Sequence[str]] = None,
) -> ClusterAssignment:
    """
    Partition embeddings into threshold-graph components.

    claim_ids name the embeddings (positional indices "0", "1", ... when
    omitted). Items are ordered by claim id before numbering, so cluster ids
    and representatives do not depend on input order.
    """
    cfg = cfg or ClusterConfig()
    if not embeddings:
        raise ValidationError("cluster needs at least one embedding")
    ids = list(claim_ids) if claim_ids is not None else [str(i) for i in range(len(embeddings))]
    if len(ids) != len(embeddings):
        raise ValidationError(f"{len(ids)} claim ids for {len(embeddings)} embeddings")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate claim ids")

    matrix = _as_matrix(embeddings)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ordered_ids = [ids[i] for i in order]
    ordered = matrix[order]

    labels = threshold_components(cosine_similarity(ordered), cfg.tau)
    vectors = dict(zip(ordered_ids, ordered))
    members: Dict[int, List[str]] = {}
    for claim_id, label in zip(ordered_ids, labels):
        members.setdefault(int(label), []).append(claim_id)

    assignment = ClusterAssignment(
        claim_to_cluster={claim_id: int(label) for claim_id, label in zip(ordered_ids, labels)},
        representatives={
            cluster_id: pick_representative(group, vectors, cfg.representative) for cluster_id, group in members.items()
        },
    )
    logger.info(f"Clustered {len(ids)} claims into {len(members)} clusters at tau={cfg.tau}")
    return assignment


def cluster_claims(claims: Sequence[ClaimTuple], embedder: Embedder, cfg: ClusterConfig) -> ClusterAssignment:
    log_separator(logger, f"SEMANTIC CLUSTERING: {len(claims)} claims")
    ordered = sorted(claims, key=sort_key)
    vectors = embed_all([c.claim_text for c in ordered], embedder)
    return cluster(vectors, cfg, claim_ids=[c.claim_id for c in ordered])


def rewrite_relations(
    relations: Sequence[RelationTuple],
    assignment: ClusterAssignment,
    stats: Optional[RewriteStats] = None,
) -> List[RelationTuple]:
    """
    Point every relation at cluster representatives.

    Relations collapsing onto one cluster are dropped, exact duplicates are
    merged, and a representative pair carrying both labels is dropped entirely.
    """
    stats = stats if stats is not None else RewriteStats()
    dangling = sorted(
        {cid for r in relations for cid in (r.source_claim_id, r.target_claim_id)} - set(assignment.claim_to_cluster)
    )
    if dangling:
        raise ValidationError(f"relations reference unclustered claims: {dangling[:5]}", [f"dangling {d}" for d in dangling])

    labels_by_pair: Dict[Tuple[str, str], List[str]] = {}
    for relation in relations:
        source = assignment.representative_of(relation.source_claim_id)
        target = assignment.representative_of(relation.target_claim_id)
        if source == target:
            stats.self_relations += 1
            continue
        labels_by_pair.setdefault((source, target), []).append(relation.relation.value)

    rewritten = []
    for (source, target), labels in labels_by_pair.items():
        distinct = set(labels)
        if len(distinct) > 1:
            stats.conflicts += 1
            logger.debug(f"Conflicting labels {sorted(distinct)} for {source} -> {target}; dropped")
            continue
        stats.duplicates += len(labels) - 1
        rewritten.append(RelationTuple(source_claim_id=source, target_claim_id=target, relation=labels[0]))

    logger.info(
        f"Rewrote {len(relations)} relations to {len(rewritten)} "
        f"({stats.self_relations} self, {stats.duplicates} duplicate, {stats.conflicts} conflicting)"
    )
    return sorted(rewritten, key=sort_key)


def cluster_records(assignment: ClusterAssignment) -> List[ClusterRecord]:
    return [
        ClusterRecord(
            claim_id=claim_id,
            cluster_id=cluster_id,
            representative_claim_id=assignment.representatives[cluster_id],
        )
        for claim_id, cluster_id in sorted(assignment.claim_to_cluster.items())
    ]
