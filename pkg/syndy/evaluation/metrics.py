from typing import Dict, Iterable, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from syndy.common.errors import ValidationError
from syndy.common.logging_config import get_logger
from syndy.common.types import ClassScores, EvalReport, Qrels, Ranking, RelationLabel

logger = get_logger(__name__)

DEFAULT_K = 20
DEFAULT_LABELS = tuple(label.value for label in RelationLabel)
AP_DENOMINATOR = "min(|relevant|, k)"
SKIP_RULE = "queries without relevant candidates are skipped"


def average_precision_at_k(ranked: Sequence[str], relevant: Set[str], k: int) -> float:
    """
    Truncated average precision.

    Sum of precision@r over the ranks r <= k holding a relevant candidate,
    divided by min(|relevant|, k). Repeated candidates count once.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    if not relevant:
        return 0.0

    hits = 0
    total = 0.0
    seen = set()
    for rank, cand_id in enumerate(ranked[:k], 1):
        if cand_id in seen:
            continue
        seen.add(cand_id)
        if cand_id in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), k)


def map_at_k(ranking: Ranking, qrels: Qrels, k: int = DEFAULT_K) -> EvalReport:
    if k < 1:
        raise ValidationError("k must be at least 1")

    per_query: Dict[str, float] = {}
    skipped = 0
    for query in qrels.queries:
        relevant = qrels.relevant_for(query.query_id)
        if not relevant:
            skipped += 1
            continue
        per_query[query.query_id] = average_precision_at_k(ranking.cand_ids(query.query_id), relevant, k)

    if not per_query:
        raise ValidationError("no query has a relevant candidate; MAP is undefined")

    score = float(np.mean([per_query[q] for q in sorted(per_query)]))
    logger.info(f"MAP@{k} = {score:.4f} over {len(per_query)} queries ({skipped} skipped)")
    return EvalReport(
        task="map",
        k=k,
        map_at_k=score,
        per_query_ap=dict(sorted(per_query.items())),
        query_count=len(per_query),
        skipped_queries=skipped,
        config={"k": k, "ap_denominator": AP_DENOMINATOR, "skip_rule": SKIP_RULE},
    )


def _label_table(rows: Iterable[Tuple[str, str]], what: str, labels: Sequence[str]) -> Dict[str, str]:
    table: Dict[str, str] = {}
    violations = []
    for item_id, label in rows:
        if item_id in table:
            violations.append(f"duplicate {what} for item {item_id}")
        elif label not in labels:
            violations.append(f"unknown label {label!r} in {what} for item {item_id}")
        table[item_id] = label
    if violations:
        raise ValidationError(f"invalid {what}", violations)
    return table


def macro_f1(
    predictions: Iterable[Tuple[str, str]],
    gold: Iterable[Tuple[str, str]],
    labels: Optional[Sequence[str]] = None,
) -> EvalReport:
    """
    Per-class precision/recall/F1 and their unweighted mean over the closed
    label set. A class with a zero denominator scores 0.
    """
    labels = list(labels or DEFAULT_LABELS)
    predicted = _label_table(predictions, "prediction", labels)
    truth = _label_table(gold, "gold", labels)

    unknown = sorted(set(predicted) - set(truth))
    if unknown:
        raise ValidationError(
            f"{len(unknown)} predictions for items without a gold label",
            [f"prediction for unknown item {item}" for item in unknown],
        )
    items = sorted(predicted)
    if not items:
        raise ValidationError("no predictions to score")
    missing = len(truth) - len(items)
    if missing:
        logger.warning(f"{missing} gold items have no prediction and are not scored")

    y_true = [truth[i] for i in items]
    y_pred = [predicted[i] for i in items]
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average=None, zero_division=0
    )
    per_class = {
        label: ClassScores(precision=float(p), recall=float(r), f1=float(f), support=int(s))
        for label, p, r, f, s in zip(labels, precision, recall, f1, support)
    }
    score = float(np.mean(f1))
    logger.info(f"Macro F1 = {score:.4f} over {len(items)} items")
    return EvalReport(
        task="f1",
        per_class=per_class,
        macro_f1=score,
        item_count=len(items),
        config={"labels": labels, "zero_division": 0, "unscored_gold_items": missing},
    )
