"""
Leakage-free train/dev/test split.

The unit of assignment is a group of clusters joined through shared posts:
a post with claims in two clusters pulls both clusters into one unit. Target
clusters holding only generated claims follow the source of the relations that
point to them. Posts without claims are units of their own.
"""

import random
from dataclasses import dataclass, field
from math import floor, isclose
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from scipy.cluster.hierarchy import DisjointSet

from syndy.clustering.semcluster import cluster_records
from syndy.common.errors import ValidationError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import sort_key
from syndy.common.types import (
    GENERATED_POST_ID,
    ClaimTuple,
    ClusterAssignment,
    ClusterRecord,
    Post,
    RelationTuple,
    SplitBundle,
    SplitName,
    SplitStats,
    TopicTuple,
)

logger = get_logger(__name__)

SPLIT_ORDER = (SplitName.TRAIN, SplitName.DEV, SplitName.TEST)
DEFAULT_PROPORTIONS = {SplitName.TRAIN: 0.8, SplitName.DEV: 0.1, SplitName.TEST: 0.1}

Proportions = Union[Mapping[str, float], Sequence[float]]


@dataclass
class SplitResult:
    bundles: Dict[SplitName, SplitBundle] = field(default_factory=dict)
    stats: SplitStats = field(default_factory=SplitStats)

    def ordered(self) -> List[SplitBundle]:
        return [self.bundles[name] for name in SPLIT_ORDER]


def normalize_proportions(proportions: Proportions) -> Dict[SplitName, float]:
    if isinstance(proportions, Mapping):
        values = {SplitName(k): float(v) for k, v in proportions.items()}
        values = {name: values.get(name, 0.0) for name in SPLIT_ORDER}
    else:
        if len(proportions) != 3:
            raise ValidationError("proportions need exactly three values (train, dev, test)")
        values = dict(zip(SPLIT_ORDER, (float(p) for p in proportions)))

    violations = [f"{name.value} proportion is negative" for name, p in values.items() if p < 0]
    if not isclose(sum(values.values()), 1.0, rel_tol=0.0, abs_tol=1e-9):
        violations.append("proportions must sum to 1")
    if violations:
        raise ValidationError("; ".join(violations), violations)
    return values


def apportion(unit_count: int, proportions: Mapping[SplitName, float]) -> Dict[SplitName, int]:
    """
    Largest-remainder apportionment of unit_count units.

    Remainder ties go to the earlier split. Every split with a positive
    proportion receives at least one unit, taken from the largest split.
    """
    positive = [name for name in SPLIT_ORDER if proportions[name] > 0]
    if unit_count < len(positive):
        raise ValidationError(f"{unit_count} split units cannot fill {len(positive)} splits")

    quotas = {name: proportions[name] * unit_count for name in SPLIT_ORDER}
    counts = {name: floor(quotas[name] + 1e-9) for name in SPLIT_ORDER}
    leftover = unit_count - sum(counts.values())
    by_remainder = sorted(SPLIT_ORDER, key=lambda n: (-(quotas[n] - counts[n]), SPLIT_ORDER.index(n)))
    for name in by_remainder[:leftover]:
        counts[name] += 1

    for name in positive:
        if counts[name] == 0:
            donor = max(SPLIT_ORDER, key=lambda n: (counts[n], -SPLIT_ORDER.index(n)))
            counts[donor] -= 1
            counts[name] += 1
    return counts


def _unit_groups(
    posts: Sequence[Post],
    claims: Sequence[ClaimTuple],
    relations: Sequence[RelationTuple],
    assignment: ClusterAssignment,
) -> Tuple[Dict[str, str], List[str]]:
    """Map every node ('post:<id>' / 'cluster:<n>') to its unit key; also return the sorted unit keys."""
    nodes = DisjointSet()
    for post in posts:
        nodes.add(f"post:{post.post_id}")
    for cluster_id in sorted(set(assignment.claim_to_cluster.values())):
        nodes.add(f"cluster:{cluster_id}")

    grounded = set()
    for claim in claims:
        cluster_node = f"cluster:{assignment.cluster_of(claim.claim_id)}"
        if claim.post_id != GENERATED_POST_ID:
            grounded.add(cluster_node)
            post_node = f"post:{claim.post_id}"
            nodes.add(post_node)
            nodes.merge(cluster_node, post_node)

    for relation in relations:
        target_node = f"cluster:{assignment.cluster_of(relation.target_claim_id)}"
        if target_node not in grounded:
            nodes.merge(target_node, f"cluster:{assignment.cluster_of(relation.source_claim_id)}")

    unit_of: Dict[str, str] = {}
    for subset in nodes.subsets():
        key = min(subset)
        for node in subset:
            unit_of[node] = key
    return unit_of, sorted(set(unit_of.values()))


def split(
    posts: Sequence[Post],
    claims: Sequence[ClaimTuple],
    topics: Sequence[TopicTuple],
    relations: Sequence[RelationTuple],
    assignment: ClusterAssignment,
    proportions: Optional[Proportions] = None,
    seed: int = 0,
    cluster_rows: Optional[Sequence[ClusterRecord]] = None,
) -> SplitResult:
    """Assign whole units to train/dev/test; relations follow their source, cross-split relations are dropped."""
    shares = normalize_proportions(proportions if proportions is not None else DEFAULT_PROPORTIONS)
    log_separator(logger, f"SPLIT: {len(posts)} posts, {len(claims)} claims")

    claim_ids = {c.claim_id for c in claims}
    referenced = claim_ids | {cid for r in relations for cid in (r.source_claim_id, r.target_claim_id)}
    unclustered = sorted(referenced - set(assignment.claim_to_cluster))
    if unclustered:
        raise ValidationError(f"claims missing from the cluster assignment: {unclustered[:5]}")

    unit_of, units = _unit_groups(posts, claims, relations, assignment)
    shuffled = list(units)
    random.Random(seed).shuffle(shuffled)
    counts = apportion(len(shuffled), shares)

    split_of_unit: Dict[str, SplitName] = {}
    cursor = 0
    for name in SPLIT_ORDER:
        for unit in shuffled[cursor : cursor + counts[name]]:
            split_of_unit[unit] = name
        cursor += counts[name]

    def split_of_post(post_id: str) -> SplitName:
        return split_of_unit[unit_of[f"post:{post_id}"]]

    def split_of_claim(claim_id: str) -> SplitName:
        return split_of_unit[unit_of[f"cluster:{assignment.cluster_of(claim_id)}"]]

    bundles = {name: SplitBundle(name=name) for name in SPLIT_ORDER}
    stats = SplitStats(units={name.value: counts[name] for name in SPLIT_ORDER})

    for post in posts:
        bundles[split_of_post(post.post_id)].posts.append(post)
    for claim in claims:
        bundles[split_of_claim(claim.claim_id)].claims.append(claim)
    for topic in topics:
        if f"post:{topic.post_id}" not in unit_of:
            raise ValidationError(f"topic tuple references unknown post {topic.post_id}")
        bundles[split_of_post(topic.post_id)].topics.append(topic)
    for relation in relations:
        home = split_of_claim(relation.source_claim_id)
        if split_of_claim(relation.target_claim_id) != home:
            stats.cross_split_relations += 1
            continue
        bundles[home].relations.append(relation)
    rows = cluster_rows if cluster_rows is not None else cluster_records(assignment)
    for row in rows:
        if row.claim_id in claim_ids:
            bundles[split_of_claim(row.claim_id)].clusters.append(row)

    for bundle in bundles.values():
        for name in ("posts", "claims", "topics", "relations", "clusters"):
            getattr(bundle, name).sort(key=sort_key)

    logger.info(
        "Split units "
        + ", ".join(f"{name.value}={counts[name]}" for name in SPLIT_ORDER)
        + f"; {stats.cross_split_relations} cross-split relations dropped"
    )
    return SplitResult(bundles=bundles, stats=stats)
