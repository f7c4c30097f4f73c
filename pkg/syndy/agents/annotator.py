"""
Dataset annotation - the three LLM jobs run over a post set.

Jobs for distinct posts/claims are independent and run concurrently (bounded
by the client's in-flight cap). Results are assembled per item, then sorted
canonically, so input order never shows in the output.
"""

import asyncio
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from syndy.common.errors import AuthenticationError, StageError, ValidationError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import claim_id_of, sort_key
from syndy.common.text import fold_key, normalize_text, truncate_at_sentence
from syndy.common.types import (
    GENERATED_POST_ID,
    AnnotationStats,
    ClaimTuple,
    JobKind,
    LlmResponse,
    Post,
    RelationLabel,
    RelationTuple,
    TopicTuple,
)
from syndy.integration.llm_client import LlmClient

logger = get_logger(__name__)

MAX_CLAIM_CHARS = 400
DEFAULT_FAILURE_THRESHOLD = 0.5


@dataclass
class _Job:
    item_id: str
    kind: JobKind
    inputs: Dict[str, Any]


@dataclass
class _JobOutcome:
    job: _Job
    response: Optional[LlmResponse] = None
    error: Optional[str] = None


@dataclass
class RelationResult:
    relations: List[RelationTuple] = field(default_factory=list)
    targets: List[ClaimTuple] = field(default_factory=list)


class Annotator:
    def __init__(
        self,
        llm: LlmClient,
        max_in_flight: Optional[int] = None,
        failure_threshold: float = DEFAULT_FAILURE_THRESHOLD,
        max_claim_chars: int = MAX_CLAIM_CHARS,
    ):
        self.llm = llm
        self.max_in_flight = max_in_flight or llm.max_in_flight
        self.failure_threshold = failure_threshold
        self.max_claim_chars = max_claim_chars
        self.stats: Dict[JobKind, AnnotationStats] = {
            JobKind.CLAIM_EXTRACT: AnnotationStats(),
            JobKind.TOPIC_LABEL: AnnotationStats(),
            JobKind.RELATION_GEN: AnnotationStats(),
        }

    # ------------------------------------------------------------------
    # Job execution
    # ------------------------------------------------------------------

    def _run_one(self, job: _Job) -> _JobOutcome:
        try:
            return _JobOutcome(job, response=self.llm.run(job.kind, job.inputs))
        except StageError as e:
            logger.warning(f"{job.kind.value} failed for {job.item_id}: {e}")
            return _JobOutcome(job, error=str(e))

    async def _run_all(self, jobs: List[_Job]) -> List[_JobOutcome]:
        semaphore = asyncio.Semaphore(self.max_in_flight)

        async def bounded(job: _Job) -> _JobOutcome:
            async with semaphore:
                return await asyncio.to_thread(self._run_one, job)

        results = await asyncio.gather(*(bounded(j) for j in jobs), return_exceptions=True)
        for result in results:
            if isinstance(result, AuthenticationError):
                raise StageError("annotate", str(result)) from result
            if isinstance(result, BaseException):
                raise result
        return list(results)

    def _execute(self, kind: JobKind, jobs: List[_Job]) -> List[_JobOutcome]:
        """Run every job, update the job's counters and enforce the failure-rate ceiling."""
        stats = self.stats[kind]
        outcomes = asyncio.run(self._run_all(jobs)) if jobs else []
        for outcome in outcomes:
            if outcome.response is None:
                stats.failed += 1
            elif outcome.response.payload is None:
                stats.failed += 1
                stats.parse_failures += 1
            else:
                stats.processed += 1

        failed_in_run = sum(1 for o in outcomes if o.response is None or o.response.payload is None)
        if jobs and failed_in_run / len(jobs) > self.failure_threshold:
            raise StageError(
                "annotate",
                f"{kind.value}: {failed_in_run}/{len(jobs)} jobs failed "
                f"(threshold {self.failure_threshold:.0%})",
            )
        return [o for o in outcomes if o.response is not None and o.response.payload is not None]

    def _clip_claim(self, text: str, stats: AnnotationStats) -> str:
        clipped, truncated = truncate_at_sentence(text, self.max_claim_chars)
        if truncated:
            stats.truncated_claims += 1
            logger.debug(f"Claim truncated to {len(clipped)} characters")
        return clipped

    # ------------------------------------------------------------------
    # Jobs
    # ------------------------------------------------------------------

    def extract_claims(self, posts: Sequence[Post]) -> List[ClaimTuple]:
        if not posts:
            raise ValidationError("extract_claims needs at least one post")
        log_separator(logger, f"CLAIM EXTRACTION: {len(posts)} posts")
        stats = self.stats[JobKind.CLAIM_EXTRACT]

        jobs = [_Job(p.post_id, JobKind.CLAIM_EXTRACT, {"post_text": p.text}) for p in _unique_posts(posts)]
        claims: Dict[str, ClaimTuple] = {}
        for outcome in self._execute(JobKind.CLAIM_EXTRACT, jobs):
            for text in outcome.response.payload["claims"]:
                text = normalize_text(text)
                if not text:
                    continue
                text = self._clip_claim(text, stats)
                claim_id = claim_id_of(outcome.job.item_id, text)
                claims[claim_id] = ClaimTuple(claim_id=claim_id, post_id=outcome.job.item_id, claim_text=text)

        result = sorted(claims.values(), key=sort_key)
        logger.info(f"Extracted {len(result)} claims from {stats.processed} posts ({stats.failed} failed)")
        return result

    def label_topics(
        self,
        posts: Sequence[Post],
        candidate_labels: Iterable[str] = (),
        allow_free_form: bool = False,
    ) -> List[TopicTuple]:
        """
        Candidate mode when candidate_labels is nonempty: labels are matched to
        a candidate case-insensitively and take its spelling; other labels are
        kept only when allow_free_form is set. Free-form mode otherwise.
        """
        if not posts:
            raise ValidationError("label_topics needs at least one post")
        candidates = {}
        for label in candidate_labels:
            label = normalize_text(label)
            if label:
                candidates.setdefault(fold_key(label), label)
        candidate_mode = bool(candidates)
        log_separator(logger, f"TOPIC LABELING: {len(posts)} posts ({'candidate' if candidate_mode else 'free-form'} mode)")
        stats = self.stats[JobKind.TOPIC_LABEL]

        inputs = {"candidates": sorted(candidates.values()), "allow_free_form": allow_free_form}
        jobs = [_Job(p.post_id, JobKind.TOPIC_LABEL, {**inputs, "post_text": p.text}) for p in _unique_posts(posts)]
        topics = set()
        for outcome in self._execute(JobKind.TOPIC_LABEL, jobs):
            for label in outcome.response.payload["topics"]:
                label = normalize_text(label)
                if not label:
                    continue
                if candidate_mode:
                    if fold_key(label) in candidates:
                        label = candidates[fold_key(label)]
                    elif not allow_free_form:
                        stats.rejected_labels += 1
                        logger.debug(f"Label '{label}' for {outcome.job.item_id} not among candidates; rejected")
                        continue
                topics.add(TopicTuple(post_id=outcome.job.item_id, topic_label=label))

        result = sorted(topics, key=sort_key)
        logger.info(f"Assigned {len(result)} topic labels ({stats.rejected_labels} rejected)")
        return result

    def generate_relations(self, claims: Sequence[ClaimTuple]) -> RelationResult:
        """
        Two steered calls per source claim, one per relation label.

        Targets are registered as claims with the generated sentinel post id;
        targets are never used as sources themselves.
        """
        if not claims:
            raise ValidationError("generate_relations needs at least one claim")
        sources = {c.claim_id: c for c in claims if c.post_id != GENERATED_POST_ID}
        log_separator(logger, f"RELATION GENERATION: {len(sources)} source claims")
        stats = self.stats[JobKind.RELATION_GEN]

        jobs = [
            _Job(claim_id, JobKind.RELATION_GEN, {"source_claim": source.claim_text, "relation": label.value})
            for claim_id, source in sorted(sources.items())
            for label in RelationLabel
        ]
        relations = set()
        targets: Dict[str, ClaimTuple] = {}
        for outcome in self._execute(JobKind.RELATION_GEN, jobs):
            source = sources[outcome.job.item_id]
            wanted = outcome.job.inputs["relation"]
            payload = outcome.response.payload
            if payload["relation"] != wanted:
                stats.rejected_labels += 1
                logger.debug(f"Steered {wanted} call for {source.claim_id} answered {payload['relation']}; dropped")
                continue
            text = normalize_text(payload["target"])
            if not text:
                stats.parse_failures += 1
                continue
            text = self._clip_claim(text, stats)
            if text == normalize_text(source.claim_text):
                stats.self_relations += 1
                continue
            target_id = claim_id_of(GENERATED_POST_ID, text)
            targets[target_id] = ClaimTuple(claim_id=target_id, post_id=GENERATED_POST_ID, claim_text=text)
            relations.add(
                RelationTuple(source_claim_id=source.claim_id, target_claim_id=target_id, relation=RelationLabel(wanted))
            )

        result = RelationResult(
            relations=sorted(relations, key=sort_key),
            targets=sorted(targets.values(), key=sort_key),
        )
        logger.info(
            f"Generated {len(result.relations)} relations, {len(result.targets)} target claims "
            f"({stats.self_relations} self-relations dropped)"
        )
        return result


def _unique_posts(posts: Sequence[Post]) -> List[Post]:
    unique: Dict[str, Post] = {}
    for post in posts:
        unique.setdefault(post.post_id, post)
    return [unique[k] for k in sorted(unique)]


def extract_claims(posts: Sequence[Post], llm: LlmClient, **kwargs) -> List[ClaimTuple]:
    return Annotator(llm, **kwargs).extract_claims(posts)


def label_topics(
    posts: Sequence[Post], candidate_labels: Iterable[str], llm: LlmClient, allow_free_form: bool = False, **kwargs
) -> List[TopicTuple]:
    return Annotator(llm, **kwargs).label_topics(posts, candidate_labels, allow_free_form=allow_free_form)


def generate_relations(claims: Sequence[ClaimTuple], llm: LlmClient, **kwargs) -> Tuple[List[RelationTuple], List[ClaimTuple]]:
    result = Annotator(llm, **kwargs).generate_relations(claims)
    return result.relations, result.targets
