"""
Post retrieval for a query plan.

Queries run concurrently (bounded by source.max_in_flight) through one shared
rate limiter. Results are merged in plan order, then source order, before
dedup, so the outcome does not depend on scheduling.
"""

import asyncio
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, List, Optional, Tuple

from syndy.common.errors import AuthenticationError, ProviderError, StageError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.text import content_hash, normalize_text, token_count
from syndy.common.types import FetchReport, Post, Query, QueryPlan, SourceConfig, SourceKind
from syndy.integration.rate_limiter import RetryPolicy, SlidingWindowRateLimiter
from syndy.integration.sources import RawPost, SearchSource, make_source

logger = get_logger(__name__)


@dataclass
class FetchResult:
    posts: List[Post] = field(default_factory=list)
    report: FetchReport = field(default_factory=FetchReport)


@dataclass
class _QueryOutcome:
    query: Query
    raws: List[RawPost]
    requests: int
    error: Optional[str] = None


def post_id_for(source_id: str, raw: RawPost) -> str:
    if raw.native_id:
        return f"{source_id}:{raw.native_id}"
    return "h_" + content_hash(raw.text)[:32]


def dedup_posts(posts: Iterable[Post]) -> Tuple[List[Post], int]:
    """Keep the first post per content hash (and per post_id)."""
    kept: List[Post] = []
    seen_hashes, seen_ids = set(), set()
    duplicates = 0
    for post in posts:
        digest = content_hash(post.text)
        if digest in seen_hashes or post.post_id in seen_ids:
            duplicates += 1
            continue
        seen_hashes.add(digest)
        seen_ids.add(post.post_id)
        kept.append(post)
    return kept, duplicates


class PostFetcher:
    def __init__(
        self,
        cfg: SourceConfig,
        source: Optional[SearchSource] = None,
        limiter: Optional[SlidingWindowRateLimiter] = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        self.cfg = cfg
        self.source = source or make_source(cfg)
        if limiter is None and cfg.kind != SourceKind.LOCAL:
            limiter = SlidingWindowRateLimiter(cfg.requests_per_minute, 60.0, sleep=sleep)
        # local corpora are not rate limited
        self.limiter = limiter
        self.retry = RetryPolicy(cfg.max_attempts, cfg.base_delay, cfg.multiplier)
        self._sleep = sleep
        self._clock = clock

    def fetch(self, plan: QueryPlan) -> FetchResult:
        if not plan.queries:
            raise StageError("fetch", f"query plan for {plan.topic_id} is empty")
        log_separator(logger, f"FETCH: {plan.topic_id} ({len(plan.queries)} queries)")
        outcomes = asyncio.run(self._fetch_all(plan.queries))
        return self._merge(plan, outcomes)

    async def _fetch_all(self, queries: Iterable[Query]) -> List[_QueryOutcome]:
        semaphore = asyncio.Semaphore(self.cfg.max_in_flight)

        async def bounded(query: Query) -> _QueryOutcome:
            async with semaphore:
                return await asyncio.to_thread(self._fetch_query, query)

        results = await asyncio.gather(*(bounded(q) for q in queries), return_exceptions=True)
        for result in results:
            if isinstance(result, AuthenticationError):
                raise StageError("fetch", str(result)) from result
            if isinstance(result, BaseException):
                raise result
        return list(results)

    def _fetch_query(self, query: Query) -> _QueryOutcome:
        cap = self.cfg.max_posts_per_query
        raws: List[RawPost] = []
        requests = 0
        token: Optional[str] = None
        try:
            while len(raws) < cap:
                page = None
                for attempt in self.retry.retrying(sleep=self._sleep):
                    with attempt:
                        if self.limiter is not None:
                            self.limiter.acquire()
                        requests += 1
                        page = self.source.search_page(query, token, self.cfg.page_size)
                raws.extend(page.items[: cap - len(raws)])
                token = page.next_token
                if not token or not page.items:
                    break
        except AuthenticationError:
            raise
        except ProviderError as e:
            logger.warning(f"Query '{query.rendered}' failed after {requests} requests: {e}")
            return _QueryOutcome(query, raws, requests, error=str(e))
        logger.debug(f"Query '{query.rendered}': {len(raws)} posts in {requests} requests")
        return _QueryOutcome(query, raws, requests)

    def _merge(self, plan: QueryPlan, outcomes: List[_QueryOutcome]) -> FetchResult:
        report = FetchReport()
        candidates: List[Post] = []
        for outcome in outcomes:
            report.requests += outcome.requests
            report.retrieved += len(outcome.raws)
            if outcome.error:
                report.failed_queries[outcome.query.rendered] = outcome.error
            for raw in outcome.raws:
                text = normalize_text(raw.text)
                if not text or token_count(text) < self.cfg.min_tokens:
                    report.too_short += 1
                    continue
                candidates.append(
                    Post(
                        post_id=post_id_for(self.source.source_id, raw),
                        source_id=self.source.source_id,
                        text=text,
                        url=raw.url,
                        fetched_at=raw.fetched_at or self._clock(),
                        query_ref=outcome.query.rendered,
                        topic_id=plan.topic_id,
                    )
                )
        posts, report.duplicates = dedup_posts(candidates)
        logger.info(
            f"Fetched {len(posts)} posts for {plan.topic_id} "
            f"({report.requests} requests, {report.duplicates} duplicates, {len(report.failed_queries)} failed queries)"
        )
        return FetchResult(posts=posts, report=report)


def fetch_posts(plan: QueryPlan, cfg: SourceConfig, source: Optional[SearchSource] = None, **kwargs) -> FetchResult:
    return PostFetcher(cfg, source=source, **kwargs).fetch(plan)
