from typing import Dict, List, Optional

from syndy.common.errors import StageError, ValidationError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import validate_record
from syndy.common.text import fold_key, normalize_text
from syndy.common.types import JobKind, KeywordSet, Topic
from syndy.integration.llm_client import LlmClient

# Module logger
logger = get_logger(__name__)


class _KeywordPool:
    """Distinct terms in first-seen order, compared case-insensitively."""

    def __init__(self):
        self.terms: List[str] = []
        self._keys: Dict[str, str] = {}

    def __contains__(self, term: str) -> bool:
        return fold_key(term) in self._keys

    def add(self, term: str) -> bool:
        term = normalize_text(term)
        if not term or term in self:
            return False
        self._keys[fold_key(term)] = term
        self.terms.append(term)
        return True


def generate_keywords(
    topic: Topic,
    heavy_n: int,
    lesser_n: int,
    llm: LlmClient,
    retry_budget: int = 3,
) -> KeywordSet:
    """
    Ask the LLM for the heavy and lesser keyword groups of a topic.

    Terms proposed for both groups stay heavy. When a response leaves either
    group short, the provider is asked again (listing the terms already
    collected) until the budget is spent; extra terms are cut off.
    """
    if heavy_n < 1 or lesser_n < 2:
        raise ValidationError("generate_keywords needs heavy_n >= 1 and lesser_n >= 2")

    log_separator(logger, f"KEYWORDS: {topic.title}")
    heavy, lesser = _KeywordPool(), _KeywordPool()
    last_raw: Optional[str] = None
    parsed_any = False
    identical_groups = False

    for attempt in range(retry_budget):
        inputs = {
            "topic": topic.title,
            "description": topic.description,
            "heavy_n": heavy_n,
            "lesser_n": lesser_n,
            "exclude": heavy.terms + lesser.terms,
        }
        try:
            response = llm.run(JobKind.KEYWORDS, inputs)
        except StageError as e:
            if attempt == 0:
                raise StageError("keywords", f"keyword generation failed for {topic.topic_id}: {e}", raw=e.raw) from e
            logger.warning(f"Keyword re-prompt {attempt + 1} for {topic.topic_id} failed, keeping collected terms: {e}")
            break

        last_raw = response.raw
        if response.payload is None:
            logger.warning(f"Unparseable keyword response for {topic.topic_id}: {response.parse_error}")
            continue
        parsed_any = True

        proposed_heavy = [normalize_text(t) for t in response.payload["heavy"]]
        proposed_lesser = [normalize_text(t) for t in response.payload["lesser"]]
        if proposed_lesser and {fold_key(t) for t in proposed_heavy} == {fold_key(t) for t in proposed_lesser}:
            identical_groups = True

        for term in proposed_heavy:
            heavy.add(term)
        for term in proposed_lesser:
            if term in heavy:
                logger.debug(f"'{term}' proposed for both groups; kept as heavy")
                continue
            lesser.add(term)

        if len(heavy.terms) >= heavy_n and len(lesser.terms) >= lesser_n:
            break
        logger.debug(f"Keyword groups short after attempt {attempt + 1}: heavy {len(heavy.terms)}, lesser {len(lesser.terms)}")

    if not parsed_any:
        raise StageError("keywords", f"no parseable keyword response for {topic.topic_id}", raw=last_raw)
    if identical_groups and len(lesser.terms) < 2:
        raise ValidationError(
            f"provider returned identical keyword groups for {topic.topic_id}",
            ["heavy and lesser groups are identical; disjointness cannot be restored"],
        )

    ks = KeywordSet(topic_id=topic.topic_id, heavy=tuple(heavy.terms[:heavy_n]), lesser=tuple(lesser.terms[:lesser_n]))
    violations = validate_record(ks)
    if violations:
        raise ValidationError(f"invalid keyword set for {topic.topic_id}", violations)
    if len(ks.heavy) < heavy_n or len(ks.lesser) < lesser_n:
        logger.warning(
            f"Keyword groups for {topic.topic_id} below requested size: "
            f"heavy {len(ks.heavy)}/{heavy_n}, lesser {len(ks.lesser)}/{lesser_n}"
        )
    logger.info(f"Keywords for {topic.topic_id}: {len(ks.heavy)} heavy, {len(ks.lesser)} lesser")
    return ks
