import dataclasses
import json
import os
import random
from datetime import datetime, timezone
from math import ceil
from unittest.mock import patch

import httpx
import pytest

from syndy.common.errors import AuthenticationError, StageError
from syndy.common.records import read_jsonl, write_jsonl
from syndy.common.types import Post, Query, QueryPlan, SourceConfig, SourceKind
from syndy.dataset.emitter import validate_dataset
from syndy.integration.rate_limiter import SlidingWindowRateLimiter
from syndy.integration.sources import (
    HttpSearchSource,
    LocalCorpusSource,
    RawPost,
    RedditSearchSource,
    SourcePage,
    local_corpus_search,
    make_source,
)
from syndy.orchestration.pipeline import run_pipeline
from syndy.selection.fetcher import PostFetcher, dedup_posts, fetch_posts, post_id_for
from tests.conftest import WORLD, FakeClock, no_sleep

NOW = datetime(2024, 5, 1, tzinfo=timezone.utc)


def plan_of(*queries: Query, topic_id: str = "t") -> QueryPlan:
    return QueryPlan(topic_id=topic_id, requested_count=len(queries), seed=0, queries=tuple(queries))


def write_corpus(directory, rows):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "posts.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return directory


class ScriptedSource:
    """A source holding `total` distinct posts for every query."""

    source_id = "scripted"

    def __init__(self, total: int):
        self.total = total
        self.requests = []

    def search_page(self, query, page_token, page_size):
        self.requests.append(page_token)
        offset = int(page_token or 0)
        end = min(offset + page_size, self.total)
        items = [RawPost(text=f"scripted post number {i} about {query.heavy_term}", native_id=str(i)) for i in range(offset, end)]
        return SourcePage(items=items, next_token=str(end) if end < self.total else None)


class TestLocalCorpus:
    def test_and_semantics_match_brute_force(self, tmp_path):
        vocabulary = ["vaccine", "booster", "clinic", "dose", "ballot", "county", "ocean", "Summer"]
        rng = random.Random(3)
        rows = [{"id": str(i), "text": " ".join(rng.sample(vocabulary, 4))} for i in range(80)]
        corpus = write_corpus(tmp_path / "corpus", rows)

        for _ in range(25):
            heavy, a, b = rng.sample(vocabulary, 3)
            query = Query.build("t", heavy, a, b)
            found = [p.native_id for p in local_corpus_search(query, corpus)]
            expected = [
                row["id"] for row in rows if all(term.casefold() in row["text"].casefold() for term in (heavy, a, b))
            ]
            assert found == expected

    def test_paging(self, tmp_path):
        rows = [{"id": str(i), "text": f"vaccine clinic dose report {i}"} for i in range(7)]
        source = LocalCorpusSource(write_corpus(tmp_path / "corpus", rows))
        query = Query.build("t", "vaccine", "clinic", "dose")
        first = source.search_page(query, None, 5)
        second = source.search_page(query, first.next_token, 5)
        assert [p.native_id for p in first.items] == ["0", "1", "2", "3", "4"]
        assert [p.native_id for p in second.items] == ["5", "6"]
        assert second.next_token is None

    def test_missing_corpus(self, tmp_path):
        source = LocalCorpusSource(tmp_path / "nowhere")
        with pytest.raises(StageError):
            source.search_page(Query.build("t", "a", "b", "c"), None, 5)

    def test_non_json_line_names_the_file(self, tmp_path):
        corpus = write_corpus(tmp_path / "corpus", [{"id": "1", "text": "vaccine clinic dose"}])
        with open(corpus / "posts.jsonl", "a", encoding="utf-8") as f:
            f.write("{not json\n")
        with pytest.raises(StageError) as excinfo:
            local_corpus_search(Query.build("t", "vaccine", "clinic", "dose"), corpus)
        assert excinfo.value.stage == "fetch"
        assert str(corpus / "posts.jsonl") in str(excinfo.value)

    def test_invalid_utf8_names_the_file(self, tmp_path):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        (corpus / "broken.jsonl").write_bytes(b'{"id": "1", "text": "vaccine \xff\xfe clinic dose"}\n')
        with pytest.raises(StageError) as excinfo:
            LocalCorpusSource(corpus).search_page(Query.build("t", "vaccine", "clinic", "dose"), None, 5)
        assert str(corpus / "broken.jsonl") in str(excinfo.value)

    def test_lone_surrogates_are_scrubbed(self, tmp_path):
        rows = [{"id": "s1", "url": "https://example.org/\ud83d", "text": "vaccine clinic dose \ud83d shots hurt"}]
        corpus = write_corpus(tmp_path / "corpus", rows)
        assert "\\ud83d" in (corpus / "posts.jsonl").read_text()

        result = fetch_posts(
            plan_of(Query.build("t", "vaccine", "clinic", "dose")), SourceConfig(endpoint=str(corpus)), sleep=no_sleep
        )
        (post,) = result.posts
        assert post.text == "vaccine clinic dose ? shots hurt"
        assert post.url == "https://example.org/?"
        write_jsonl(tmp_path / "posts.jsonl", result.posts)
        assert read_jsonl(tmp_path / "posts.jsonl", Post) == result.posts

    def test_make_source_needs_endpoint(self):
        with pytest.raises(StageError):
            make_source(SourceConfig(kind=SourceKind.LOCAL))


class TestFetcher:
    def test_cap_and_request_count(self):
        source = ScriptedSource(total=120)
        cfg = SourceConfig(max_posts_per_query=50, page_size=20)
        result = fetch_posts(plan_of(Query.build("t", "ballot", "county", "tally")), cfg, source=source, sleep=no_sleep)
        assert len(result.posts) == 50
        assert result.report.requests == len(source.requests) >= ceil(50 / 20)
        assert result.report.retrieved == 50

    def test_stops_when_source_is_exhausted(self):
        source = ScriptedSource(total=7)
        cfg = SourceConfig(max_posts_per_query=100, page_size=5)
        result = fetch_posts(plan_of(Query.build("t", "ballot", "county", "tally")), cfg, source=source, sleep=no_sleep)
        assert len(result.posts) == 7
        assert source.requests == [None, "5"]

    def test_dedup_across_queries(self, tmp_path):
        rows = [
            {"id": "1", "text": "vaccine clinic dose pharmacy all in one post"},
            {"id": "2", "text": "vaccine clinic dose only here"},
            {"id": "3", "text": "vaccine pharmacy dose only there"},
        ]
        cfg = SourceConfig(endpoint=str(write_corpus(tmp_path / "corpus", rows)))
        plan = plan_of(Query.build("t", "vaccine", "clinic", "dose"), Query.build("t", "vaccine", "dose", "pharmacy"))
        result = PostFetcher(cfg, sleep=no_sleep).fetch(plan)
        assert [p.post_id for p in result.posts] == ["local:1", "local:2", "local:3"]
        assert result.report.duplicates == 1
        # first query that surfaced a post keeps it
        assert result.posts[0].query_ref == "vaccine AND clinic AND dose"

    def test_short_posts_are_dropped(self, tmp_path):
        rows = [{"id": "1", "text": "vaccine clinic dose"}, {"id": "2", "text": "vaccine clinic dose and more words"}]
        cfg = SourceConfig(endpoint=str(write_corpus(tmp_path / "corpus", rows)), min_tokens=4)
        result = fetch_posts(plan_of(Query.build("t", "vaccine", "clinic", "dose")), cfg, sleep=no_sleep)
        assert [p.post_id for p in result.posts] == ["local:2"]
        assert result.report.too_short == 1

    def test_empty_plan(self):
        with pytest.raises(StageError):
            fetch_posts(plan_of(), SourceConfig(), source=ScriptedSource(1))

    def test_identity_without_native_id_is_content_hash(self):
        assert post_id_for("x", RawPost(text="Same  text")) == post_id_for("y", RawPost(text="Same text"))
        assert post_id_for("x", RawPost(text="t", native_id="9")) == "x:9"

    def test_dedup_posts_by_content(self):
        source = ScriptedSource(total=2)
        posts = fetch_posts(plan_of(Query.build("t", "a", "b", "c")), SourceConfig(), source=source, sleep=no_sleep).posts
        kept, duplicates = dedup_posts(posts + [posts[0].model_copy(update={"post_id": "other"})])
        assert kept == posts
        assert duplicates == 1


class TestRateLimiter:
    def test_sliding_window(self, clock):
        limiter = SlidingWindowRateLimiter(3, 10.0, clock=clock, sleep=clock.sleep, record_history=True)
        for _ in range(7):
            limiter.acquire()
        assert limiter.history == [0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 20.0]
        for start in limiter.history:
            assert sum(1 for t in limiter.history if start <= t < start + 10.0) <= 3

    def test_requests_spread_out(self):
        clock = FakeClock()
        limiter = SlidingWindowRateLimiter(2, 1.0, clock=clock, sleep=clock.sleep, record_history=True)
        for _ in range(4):
            limiter.acquire()
            clock.now += 0.25
        assert limiter.history == [0.0, 0.25, 1.0, 1.25]

    def test_history_is_opt_in(self, clock):
        limiter = SlidingWindowRateLimiter(2, 1.0, clock=clock, sleep=clock.sleep)
        for _ in range(5):
            limiter.acquire()
        assert limiter.history == []
        assert clock.now == 2.0

    def test_positive_cap(self):
        with pytest.raises(ValueError):
            SlidingWindowRateLimiter(0)


def mock_client(handler) -> httpx.Client:
    return httpx.Client(transport=httpx.MockTransport(handler))


class TestHttpSources:
    def test_generic_endpoint_and_bearer_key(self):
        seen = []

        def handler(request: httpx.Request) -> httpx.Response:
            seen.append(request)
            return httpx.Response(
                200, json={"items": [{"id": "a1", "text": "green card wait time uscis"}], "next": None}
            )

        with patch.dict(os.environ, {"SYNDY_SOURCE_API_KEY": "secret-token"}):
            source = HttpSearchSource("https://search.example.org/api", client=mock_client(handler))
            page = source.search_page(Query.build("t", "green card", "uscis", "wait time"), None, 10)

        assert [p.native_id for p in page.items] == ["a1"]
        assert seen[0].headers["Authorization"] == "Bearer secret-token"
        assert seen[0].url.params["q"] == '"green card" AND uscis AND "wait time"'
        assert seen[0].url.params["limit"] == "10"

    def test_reddit_listing(self):
        def handler(request: httpx.Request) -> httpx.Response:
            assert request.url.params.get("after") == "t3_prev"
            listing = {
                "data": {
                    "after": "t3_next",
                    "children": [
                        {
                            "data": {
                                "id": "abc",
                                "title": "Ballots found",
                                "selftext": "In the county dump.",
                                "permalink": "/r/x/comments/abc",
                                "created_utc": 1700000000,
                                "author": "throwaway_4471",
                            }
                        }
                    ],
                }
            }
            return httpx.Response(200, json=listing)

        source = RedditSearchSource(RedditSearchSource.DEFAULT_ENDPOINT, source_id="reddit", client=mock_client(handler))
        page = source.search_page(Query.build("t", "ballot", "county", "dump"), "t3_prev", 25)
        (post,) = page.items
        assert post.text == "Ballots found\nIn the county dump."
        assert post.url == "https://www.reddit.com/r/x/comments/abc"
        assert page.next_token == "t3_next"
        assert "throwaway_4471" not in str(dataclasses.asdict(post))

    def test_authentication_failure_aborts_fetch(self):
        source = HttpSearchSource("https://search.example.org/api", client=mock_client(lambda r: httpx.Response(401)))
        with pytest.raises(AuthenticationError):
            source.search_page(Query.build("t", "a", "b", "c"), None, 5)

        cfg = SourceConfig(kind=SourceKind.HTTP, endpoint="https://search.example.org/api")
        limiter = SlidingWindowRateLimiter(1000, 60.0)
        with pytest.raises(StageError):
            PostFetcher(cfg, source=source, limiter=limiter, sleep=no_sleep).fetch(plan_of(Query.build("t", "a", "b", "c")))

    def test_throttling_is_retried_with_retry_after(self):
        responses = iter(
            [
                httpx.Response(429, headers={"Retry-After": "7"}),
                httpx.Response(200, json={"items": [{"id": "1", "text": "ballot county tally post"}], "next": None}),
            ]
        )
        sleeps = []
        source = HttpSearchSource("https://search.example.org/api", client=mock_client(lambda r: next(responses)))
        cfg = SourceConfig(kind=SourceKind.HTTP, endpoint="https://search.example.org/api", max_in_flight=1)
        fetcher = PostFetcher(cfg, source=source, limiter=SlidingWindowRateLimiter(1000, 60.0), sleep=sleeps.append)
        result = fetcher.fetch(plan_of(Query.build("t", "ballot", "county", "tally")))
        assert [p.post_id for p in result.posts] == ["http:1"]
        assert result.report.requests == 2
        assert sleeps == [7.0]

    def test_client_errors_fail_only_the_query(self):
        source = HttpSearchSource("https://search.example.org/api", client=mock_client(lambda r: httpx.Response(404)))
        cfg = SourceConfig(kind=SourceKind.HTTP, endpoint="https://search.example.org/api")
        result = PostFetcher(cfg, source=source, limiter=SlidingWindowRateLimiter(1000, 60.0), sleep=no_sleep).fetch(
            plan_of(Query.build("t", "a", "b", "c"))
        )
        assert result.posts == []
        assert list(result.report.failed_queries) == ["a AND b AND c"]


def test_pipeline_survives_lone_surrogates(world, tmp_path):
    config = world()
    question = WORLD["vaccine safety"]["question"]
    with open(tmp_path / "corpus" / "posts.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps({"id": "bad", "text": f"{question} \ud83d Shots hurt."}) + "\n")

    report = run_pipeline(config)
    assert report.ok
    assert validate_dataset(config.out_path) == []
