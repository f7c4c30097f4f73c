"""
Evaluation inputs and exports.

A qrels directory holds queries.jsonl ({query_id, text}), candidates.jsonl
({cand_id, text}) and either qrels.jsonl ({query_id, cand_id}) or qrels.tsv
(query_id<TAB>cand_id, or TREC's four columns "qid 0 cand_id rel").
Run files are JSONL {query_id, cand_id, score} or TREC "qid Q0 cand_id rank score tag".
Label files are JSONL {item_id, label, ...}.
"""

import csv
import json
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

from syndy.common.errors import ValidationError
from syndy.common.logging_config import get_logger
from syndy.common.records import read_jsonl_dicts
from syndy.common.types import Qrels, QrelsCandidate, QrelsQuery, Ranking, SplitBundle
from syndy.common.utils import canonical_json
from syndy.evaluation.ranking import order_candidates

logger = get_logger(__name__)

TASK_MATCHING = "matching"
TASK_TOPICS = "topics"


def validate_qrels(qrels: Qrels) -> List[str]:
    violations = []
    query_ids = [q.query_id for q in qrels.queries]
    cand_ids = [c.cand_id for c in qrels.candidates]
    if len(set(query_ids)) != len(query_ids):
        violations.append("duplicate query_id")
    if len(set(cand_ids)) != len(cand_ids):
        violations.append("duplicate cand_id")
    known_queries, known_cands = set(query_ids), set(cand_ids)
    for query_id, cand_id in qrels.relevance:
        if query_id not in known_queries:
            violations.append(f"relevance references unknown query {query_id}")
        if cand_id not in known_cands:
            violations.append(f"relevance references unknown candidate {cand_id}")
    return violations


def _read_relevance_tsv(path: Path) -> List[Tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.reader(f, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if len(row) == 1:
                row = row[0].split()
            if len(row) >= 4:
                if float(row[3]) > 0:
                    pairs.append((row[0], row[2]))
            elif len(row) >= 2:
                pairs.append((row[0], row[1]))
    return pairs


def load_qrels(qrels_dir: Path) -> Qrels:
    qrels_dir = Path(qrels_dir)
    queries = [QrelsQuery.model_validate(r) for r in read_jsonl_dicts(qrels_dir / "queries.jsonl")]
    candidates = [QrelsCandidate.model_validate(r) for r in read_jsonl_dicts(qrels_dir / "candidates.jsonl")]
    if (qrels_dir / "qrels.jsonl").exists():
        relevance = [(str(r["query_id"]), str(r["cand_id"])) for r in read_jsonl_dicts(qrels_dir / "qrels.jsonl")]
    elif (qrels_dir / "qrels.tsv").exists():
        relevance = _read_relevance_tsv(qrels_dir / "qrels.tsv")
    else:
        raise ValidationError(f"{qrels_dir} has neither qrels.jsonl nor qrels.tsv")

    qrels = Qrels(queries=queries, candidates=candidates, relevance=sorted(set(relevance)))
    violations = validate_qrels(qrels)
    if violations:
        raise ValidationError(f"invalid qrels in {qrels_dir}", violations)
    logger.debug(f"Loaded qrels: {len(queries)} queries, {len(candidates)} candidates, {len(qrels.relevance)} pairs")
    return qrels


def write_qrels(qrels: Qrels, qrels_dir: Path) -> None:
    qrels_dir = Path(qrels_dir)
    qrels_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "queries.jsonl": [q.model_dump() for q in qrels.queries],
        "candidates.jsonl": [c.model_dump() for c in qrels.candidates],
        "qrels.jsonl": [{"query_id": q, "cand_id": c} for q, c in qrels.relevance],
    }
    for name, rows in files.items():
        write_jsonl_rows(rows, qrels_dir / name)


def load_run(path: Path) -> Ranking:
    path = Path(path)
    scored: Dict[str, List[Tuple[str, float]]] = {}
    if path.suffix == ".jsonl":
        for row in read_jsonl_dicts(path):
            scored.setdefault(str(row["query_id"]), []).append((str(row["cand_id"]), float(row["score"])))
    else:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 5:
                    raise ValidationError(f"{path}:{lineno}: expected 'qid Q0 cand_id rank score [tag]'")
                scored.setdefault(parts[0], []).append((parts[2], float(parts[4])))
    return Ranking(ranked={q: order_candidates(pairs) for q, pairs in sorted(scored.items())})


def write_run(ranking: Ranking, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for query_id in sorted(ranking.ranked):
            for cand_id, score in ranking.ranked[query_id]:
                f.write(canonical_json({"query_id": query_id, "cand_id": cand_id, "score": score}) + "\n")


def load_labels(path: Path) -> List[Tuple[str, str]]:
    rows = read_jsonl_dicts(Path(path))
    missing = [i for i, r in enumerate(rows, 1) if "item_id" not in r or "label" not in r]
    if missing:
        raise ValidationError(f"{path}: rows {missing[:5]} lack item_id or label")
    return [(str(r["item_id"]), str(r["label"])) for r in rows]


# ---------------------------------------------------------------------------
# Export from an emitted split
# ---------------------------------------------------------------------------


def qrels_from_split(bundle: SplitBundle, task: str = TASK_MATCHING) -> Qrels:
    """
    matching: each post against every cluster representative of the split;
    relevant are the representatives of the post's own claims.
    topics: each post against every topic label of the split.
    """
    claims = {c.claim_id: c for c in bundle.claims}
    queries = [QrelsQuery(query_id=p.post_id, text=p.text) for p in bundle.posts]

    if task == TASK_MATCHING:
        rep_of = {row.claim_id: row.representative_claim_id for row in bundle.clusters}
        rep_ids = sorted(set(rep_of.values()))
        candidates = [QrelsCandidate(cand_id=r, text=claims[r].claim_text) for r in rep_ids if r in claims]
        post_ids = {p.post_id for p in bundle.posts}
        relevance = {(c.post_id, rep_of[c.claim_id]) for c in bundle.claims if c.post_id in post_ids and c.claim_id in rep_of}
    elif task == TASK_TOPICS:
        labels = sorted({t.topic_label for t in bundle.topics})
        candidates = [QrelsCandidate(cand_id=f"topic:{label}", text=label) for label in labels]
        relevance = {(t.post_id, f"topic:{t.topic_label}") for t in bundle.topics}
    else:
        raise ValidationError(f"unknown qrels task {task!r}; expected {TASK_MATCHING} or {TASK_TOPICS}")

    qrels = Qrels(queries=queries, candidates=candidates, relevance=sorted(relevance))
    violations = validate_qrels(qrels)
    if violations:
        raise ValidationError(f"split {bundle.name.value} does not yield consistent qrels", violations)
    return qrels


def relation_items(bundle: SplitBundle) -> List[Dict[str, str]]:
    """Gold relation file rows: {item_id, source_text, target_text, label}."""
    texts: Mapping[str, str] = {c.claim_id: c.claim_text for c in bundle.claims}
    return [
        {
            "item_id": f"{r.source_claim_id}|{r.target_claim_id}",
            "source_claim_id": r.source_claim_id,
            "target_claim_id": r.target_claim_id,
            "source_text": texts[r.source_claim_id],
            "target_text": texts[r.target_claim_id],
            "label": r.relation.value,
        }
        for r in bundle.relations
    ]


def write_jsonl_rows(rows: List[Dict[str, str]], path: Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return len(rows)
