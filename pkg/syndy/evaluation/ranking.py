from typing import List, Tuple

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from syndy.common.logging_config import get_logger
from syndy.common.types import Qrels, Ranking
from syndy.integration.embeddings import Embedder

logger = get_logger(__name__)


def order_candidates(scored: List[Tuple[str, float]]) -> List[Tuple[str, float]]:
    """Descending score, equal scores by ascending cand_id; a repeated candidate keeps its best score."""
    best = {}
    for cand_id, score in scored:
        if cand_id not in best or score > best[cand_id]:
            best[cand_id] = float(score)
    return sorted(best.items(), key=lambda item: (-item[1], item[0]))


def rank_by_embedding(qrels: Qrels, embedder: Embedder) -> Ranking:
    """Rank every candidate for every query by cosine similarity of their embeddings."""
    query_vectors = embedder.embed_all([q.text for q in qrels.queries])
    cand_vectors = embedder.embed_all([c.text for c in qrels.candidates])
    scores = cosine_similarity(
        np.asarray([v.values for v in query_vectors]),
        np.asarray([v.values for v in cand_vectors]),
    )
    cand_ids = [c.cand_id for c in qrels.candidates]
    ranking = Ranking(
        ranked={
            query.query_id: order_candidates(list(zip(cand_ids, row.tolist())))
            for query, row in zip(qrels.queries, scores)
        }
    )
    logger.info(f"Ranked {len(cand_ids)} candidates for {len(qrels.queries)} queries")
    return ranking
