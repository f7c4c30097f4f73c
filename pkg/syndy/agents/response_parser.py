import json
import re
from typing import Any, Dict, List, Optional, Type, Union

from pydantic import BaseModel, ConfigDict, field_validator
from pydantic import ValidationError as PydanticValidationError

from syndy.common.errors import ParseError
from syndy.common.logging_config import get_logger, truncate_for_log
from syndy.common.types import JobKind, RelationLabel

# Module logger
logger = get_logger(__name__)

_FENCE = re.compile(r"```[A-Za-z0-9_-]*")


class _Payload(BaseModel):
    model_config = ConfigDict(extra="ignore", frozen=True)


class KeywordsPayload(_Payload):
    heavy: List[str]
    lesser: List[str]


class ClaimsPayload(_Payload):
    claims: List[str]


class TopicsPayload(_Payload):
    topics: List[str]


class RelationPayload(_Payload):
    target: str
    relation: RelationLabel

    @field_validator("relation", mode="before")
    @classmethod
    def _closed_label(cls, v: Any) -> Any:
        if not isinstance(v, str) or v not in {label.value for label in RelationLabel}:
            raise ValueError(f"unknown label {v!r}")
        return v


PAYLOAD_SCHEMAS: Dict[JobKind, Type[_Payload]] = {
    JobKind.KEYWORDS: KeywordsPayload,
    JobKind.CLAIM_EXTRACT: ClaimsPayload,
    JobKind.TOPIC_LABEL: TopicsPayload,
    JobKind.RELATION_GEN: RelationPayload,
}


def _loads(text: str) -> Any:
    # deeply nested input blows the parser's recursion limit
    try:
        return json.loads(text)
    except RecursionError as e:
        raise ValueError("nesting too deep") from e


def repair_candidate(text: str) -> Optional[str]:
    """Strip code fences and trim to the outermost braces; None when no object is present."""
    stripped = _FENCE.sub("", text)
    start, end = stripped.find("{"), stripped.rfind("}")
    if start < 0 or end <= start:
        return None
    return stripped[start : end + 1]


class ResponseParser:
    @staticmethod
    def parse_structured(raw: Union[str, bytes], kind: JobKind) -> _Payload:
        """
        Parse a completion into the job's payload model.

        Strict JSON is tried first, then one repair pass. Raises ParseError
        with stage json (nothing object-like), repair (repaired text still not
        JSON) or schema (JSON of the wrong shape, unknown relation label).
        """
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        if not raw.strip():
            raise ParseError("json", "empty completion", raw)

        try:
            data = _loads(raw)
        except ValueError:
            candidate = repair_candidate(raw)
            if candidate is None:
                raise ParseError("json", "no JSON object in completion", raw)
            try:
                data = _loads(candidate)
            except ValueError as e:
                raise ParseError("repair", f"still not JSON after repair: {e}", raw)
            logger.debug(f"Repaired {kind.value} completion: {truncate_for_log(candidate, 200)}")

        if not isinstance(data, dict):
            raise ParseError("schema", f"expected a JSON object, got {type(data).__name__}", raw)

        schema = PAYLOAD_SCHEMAS[kind]
        try:
            return schema.model_validate(data)
        except PydanticValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(p) for p in first["loc"])
            message = first["msg"].removeprefix("Value error, ")
            raise ParseError("schema", f"{loc}: {message}" if loc else message, raw)


parse_structured = ResponseParser.parse_structured
