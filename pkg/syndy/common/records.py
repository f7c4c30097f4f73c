"""
Record identity, validation and JSON Lines persistence.

Every tuple type has one canonical on-disk form (JSON Lines, UTF-8, one record
per line). Validation reports every invariant violation at once; violations
are data, not exceptions.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Type, TypeVar

from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from syndy.common.errors import StageError, ValidationError
from syndy.common.logging_config import get_logger
from syndy.common.text import normalize_text
from syndy.common.types import (
    GENERATED_POST_ID,
    QUERY_SEPARATOR,
    ClaimTuple,
    ClusterRecord,
    KeywordSet,
    Post,
    Query,
    RelationLabel,
    RelationTuple,
    TopicTuple,
)
from syndy.common.utils import canonical_json, sha256_hex

logger = get_logger(__name__)

R = TypeVar("R", bound=BaseModel)

# file stem -> record model, in emission order
RECORD_FILES: Dict[str, Type[BaseModel]] = {
    "posts": Post,
    "claims": ClaimTuple,
    "topics": TopicTuple,
    "relations": RelationTuple,
    "clusters": ClusterRecord,
}


def claim_id_of(post_id: str, claim_text: str) -> str:
    """Deterministic claim id: digest of the post id and the normalized claim text."""
    text = normalize_text(claim_text)
    if not post_id or not post_id.strip() or not text:
        raise ValidationError("claim_id_of requires a nonempty post_id and claim_text")
    return "c_" + sha256_hex(f"{post_id}\x1f{text}")[:32]


def sort_key(record: BaseModel) -> tuple:
    """Canonical emission order: by id, then remaining identifying fields."""
    if isinstance(record, Post):
        return (record.post_id,)
    if isinstance(record, ClaimTuple):
        return (record.claim_id,)
    if isinstance(record, TopicTuple):
        return (record.post_id, record.topic_label)
    if isinstance(record, RelationTuple):
        return (record.source_claim_id, record.target_claim_id, _label_value(record.relation))
    if isinstance(record, ClusterRecord):
        return (record.claim_id,)
    return (canonical_json(record.model_dump(mode="json")),)


def validate_record(
    record: BaseModel,
    post_ids: Optional[Set[str]] = None,
    claim_ids: Optional[Set[str]] = None,
) -> List[str]:
    """
    Return every invariant violation of a record (empty list when ok).

    Reference checks run only when the matching id table is supplied.
    Records built with model_construct (unvalidated) are accepted so that
    parsed-from-storage data can be inspected as-is.
    """
    violations: List[str] = []

    def text_ok(field: str, value: Any) -> None:
        if not isinstance(value, str) or not normalize_text(value):
            violations.append(f"empty {field}")

    if isinstance(record, Post):
        text_ok("post_id", record.post_id)
        text_ok("source_id", record.source_id)
        text_ok("text", record.text)
        text_ok("topic_id", record.topic_id)
        text_ok("query_ref", record.query_ref)

    elif isinstance(record, ClaimTuple):
        text_ok("claim_id", record.claim_id)
        text_ok("post_id", record.post_id)
        text_ok("claim_text", record.claim_text)
        if not violations and record.claim_id != claim_id_of(record.post_id, record.claim_text):
            violations.append("claim_id does not match content")
        if post_ids is not None and record.post_id != GENERATED_POST_ID and record.post_id not in post_ids:
            violations.append(f"dangling post_id {record.post_id}")

    elif isinstance(record, TopicTuple):
        text_ok("post_id", record.post_id)
        text_ok("topic_label", record.topic_label)
        if post_ids is not None and record.post_id not in post_ids:
            violations.append(f"dangling post_id {record.post_id}")

    elif isinstance(record, RelationTuple):
        text_ok("source_claim_id", record.source_claim_id)
        text_ok("target_claim_id", record.target_claim_id)
        if record.source_claim_id == record.target_claim_id:
            violations.append("self-relation")
        if _label_value(record.relation) not in {label.value for label in RelationLabel}:
            violations.append(f"unknown label {_label_value(record.relation)!r}")
        if claim_ids is not None:
            for field in ("source_claim_id", "target_claim_id"):
                value = getattr(record, field)
                if value not in claim_ids:
                    violations.append(f"dangling {field} {value}")

    elif isinstance(record, ClusterRecord):
        text_ok("claim_id", record.claim_id)
        text_ok("representative_claim_id", record.representative_claim_id)
        if not isinstance(record.cluster_id, int) or record.cluster_id < 0:
            violations.append("cluster_id must be a nonnegative integer")
        if claim_ids is not None:
            for field in ("claim_id", "representative_claim_id"):
                value = getattr(record, field)
                if value not in claim_ids:
                    violations.append(f"dangling {field} {value}")

    elif isinstance(record, KeywordSet):
        violations.extend(_keyword_set_violations(record))

    elif isinstance(record, Query):
        violations.extend(_query_violations(record))

    else:
        violations.append(f"unknown record type {type(record).__name__}")

    return violations


def validate_raw(model: Type[R], data: Dict[str, Any], **tables: Optional[Set[str]]) -> List[str]:
    """Validate an unparsed dict: schema errors and invariant violations together."""
    violations: List[str] = []
    try:
        record = model.model_validate(data)
    except PydanticValidationError as e:
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"])
            if loc == "relation":
                violations.append(f"unknown label {data.get('relation')!r}")
            else:
                violations.append(f"{loc}: {err['msg']}")
        fields = {k: data.get(k) for k in model.model_fields}
        record = model.model_construct(**fields)
    extra = sorted(set(data) - set(model.model_fields))
    if extra:
        violations.append(f"unexpected fields {extra}")
    for violation in validate_record(record, **tables):
        if violation not in violations:
            violations.append(violation)
    return violations


def _label_value(label: Any) -> str:
    return label.value if isinstance(label, RelationLabel) else str(label)


def _keyword_set_violations(ks: KeywordSet) -> List[str]:
    violations = []
    if not ks.heavy:
        violations.append("heavy keyword list is empty")
    if len(ks.lesser) < 2:
        violations.append("lesser keyword list needs at least 2 terms")
    for name, terms in (("heavy", ks.heavy), ("lesser", ks.lesser)):
        folded = [normalize_text(t).casefold() for t in terms]
        if any(not f for f in folded):
            violations.append(f"empty {name} keyword")
        if len(set(folded)) != len(folded):
            violations.append(f"duplicate {name} keyword")
    overlap = {normalize_text(t).casefold() for t in ks.heavy} & {normalize_text(t).casefold() for t in ks.lesser}
    if overlap:
        violations.append(f"heavy and lesser overlap: {sorted(overlap)}")
    return violations


def _query_violations(q: Query) -> List[str]:
    violations = []
    a, b = q.lesser_terms
    if normalize_text(a).casefold() == normalize_text(b).casefold():
        violations.append("lesser terms are not distinct")
    if q.rendered.count(QUERY_SEPARATOR) != 2:
        violations.append("rendered query must contain exactly two separators")
    if q.rendered != q.rendered.strip():
        violations.append("rendered query has surrounding whitespace")
    if q.rendered != Query.build(q.topic_id, q.heavy_term, a, b).rendered:
        violations.append("rendered query is not canonical")
    return violations


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------


def serialize_record(record: BaseModel) -> str:
    return json.dumps(record.model_dump(mode="json"), ensure_ascii=False, sort_keys=False)


def parse_record(model: Type[R], line: str) -> R:
    return model.model_validate_json(line)


def write_jsonl(path: Path, records: Iterable[BaseModel]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(serialize_record(record) + "\n")
            count += 1
    return count


def read_jsonl(path: Path, model: Type[R]) -> List[R]:
    records: List[R] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(parse_record(model, line))
                except PydanticValidationError as e:
                    raise ValidationError(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
    except OSError as e:
        raise StageError("io", f"cannot read {path}: {e}") from e
    logger.debug(f"Read {len(records)} {model.__name__} records from {path}")
    return records


def read_jsonl_dicts(path: Path) -> List[Dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {e.msg}") from e
    return rows
