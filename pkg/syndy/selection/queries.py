"""
Query construction: one heavy keyword AND two lesser keywords.

The enumeration is the full Cartesian product of heavy terms with unordered
lesser pairs; sampling draws from it uniformly without replacement.
"""

import random
from itertools import combinations
from math import comb
from typing import List

from syndy.common.logging_config import get_logger
from syndy.common.types import KeywordSet, Query, QueryPlan

logger = get_logger(__name__)


def enumeration_size(ks: KeywordSet) -> int:
    return len(ks.heavy) * comb(len(ks.lesser), 2)


def enumerate_queries(ks: KeywordSet) -> List[Query]:
    """Every (heavy, lesser pair) combination once; heavy order major, lesser pair lexicographic minor."""
    queries = []
    for heavy in ks.heavy:
        per_heavy = [Query.build(ks.topic_id, heavy, a, b) for a, b in combinations(ks.lesser, 2)]
        per_heavy.sort(key=lambda q: tuple((t.casefold(), t) for t in q.lesser_terms))
        queries.extend(per_heavy)
    return queries


def sample_queries(ks: KeywordSet, n: int, seed: int) -> QueryPlan:
    if n < 1:
        raise ValueError("n must be at least 1")

    universe = enumerate_queries(ks)
    truncated = n > len(universe)
    if truncated:
        logger.warning(f"Requested {n} queries for {ks.topic_id} but only {len(universe)} exist; using all")
        chosen = list(range(len(universe)))
    else:
        chosen = sorted(random.Random(seed).sample(range(len(universe)), n))

    logger.debug(f"Sampled {len(chosen)}/{len(universe)} queries for {ks.topic_id} (seed={seed})")
    return QueryPlan(
        topic_id=ks.topic_id,
        requested_count=n,
        seed=seed,
        queries=tuple(universe[i] for i in chosen),
        truncated=truncated,
    )
