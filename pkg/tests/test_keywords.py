import json
from collections import Counter
from itertools import combinations
from math import comb

import pytest

from syndy.agents.keywords import generate_keywords
from syndy.common.errors import StageError, TransportError, ValidationError
from syndy.common.records import validate_record
from syndy.common.types import QUERY_SEPARATOR, KeywordSet, Topic
from syndy.selection.queries import enumerate_queries, enumeration_size, sample_queries
from tests.conftest import ScriptedProvider, make_client

TOPIC = Topic.from_title("green card backlog")


def keywords_json(heavy, lesser) -> str:
    return json.dumps({"heavy": heavy, "lesser": lesser})


def keyword_set(heavy_count: int, lesser_count: int) -> KeywordSet:
    return KeywordSet(
        topic_id="t",
        heavy=tuple(f"h{i}" for i in range(heavy_count)),
        lesser=tuple(f"l{j}" for j in range(lesser_count)),
    )


class TestGenerateKeywords:
    def test_fixture_passthrough(self):
        provider = ScriptedProvider(keywords_json(["green card", "visa backlog"], ["uscis", "immigration", "wait time"]))
        ks = generate_keywords(TOPIC, 2, 3, make_client(provider))
        assert ks == KeywordSet(
            topic_id="green-card-backlog",
            heavy=("green card", "visa backlog"),
            lesser=("uscis", "immigration", "wait time"),
        )
        assert provider.calls == 1

    def test_heavy_wins_overlap(self):
        provider = ScriptedProvider(keywords_json(["visa", "green card"], ["Visa", "uscis", "queue"]))
        ks = generate_keywords(TOPIC, 2, 2, make_client(provider))
        assert ks.heavy == ("visa", "green card")
        assert ks.lesser == ("uscis", "queue")
        assert validate_record(ks) == []

    def test_short_groups_are_reprompted_with_collected_terms(self):
        provider = ScriptedProvider(
            keywords_json(["visa"], ["uscis"]),
            keywords_json(["visa"], ["uscis", "queue", "priority date"]),
        )
        ks = generate_keywords(TOPIC, 1, 3, make_client(provider))
        assert ks.lesser == ("uscis", "queue", "priority date")
        assert provider.calls == 2
        second = provider.requests[1]
        assert second.inputs["exclude"] == ["visa", "uscis"]
        assert "already collected" in second.user

    def test_extra_terms_are_cut(self):
        provider = ScriptedProvider(keywords_json(["a", "b", "c"], ["d", "e", "f", "g"]))
        ks = generate_keywords(TOPIC, 2, 2, make_client(provider))
        assert ks.heavy == ("a", "b")
        assert ks.lesser == ("d", "e")

    def test_identical_groups_cannot_be_fixed(self):
        provider = ScriptedProvider(keywords_json(["x", "y"], ["x", "y"]))
        with pytest.raises(ValidationError):
            generate_keywords(TOPIC, 2, 2, make_client(provider), retry_budget=2)

    def test_unparseable_responses_carry_raw_text(self):
        provider = ScriptedProvider("I cannot help with that")
        with pytest.raises(StageError) as excinfo:
            generate_keywords(TOPIC, 1, 2, make_client(provider), retry_budget=2)
        assert excinfo.value.stage == "keywords"
        assert excinfo.value.raw == "I cannot help with that"

    def test_provider_failure_is_a_stage_error(self):
        provider = ScriptedProvider(TransportError("HTTP 503"))
        with pytest.raises(StageError) as excinfo:
            generate_keywords(TOPIC, 1, 2, make_client(provider, max_attempts=2))
        assert excinfo.value.stage == "keywords"
        assert provider.calls == 2

    def test_group_sizes_are_checked(self):
        with pytest.raises(ValidationError):
            generate_keywords(TOPIC, 0, 2, make_client(ScriptedProvider("{}")))
        with pytest.raises(ValidationError):
            generate_keywords(TOPIC, 1, 1, make_client(ScriptedProvider("{}")))


class TestEnumerateQueries:
    def test_single_combination(self):
        ks = KeywordSet(topic_id="t", heavy=("h1",), lesser=("l1", "l2"))
        assert [q.rendered for q in enumerate_queries(ks)] == ["h1 AND l1 AND l2"]

    def test_matches_brute_force_for_small_sizes(self):
        for heavy_count in range(1, 9):
            for lesser_count in range(2, 9):
                ks = keyword_set(heavy_count, lesser_count)
                queries = enumerate_queries(ks)
                expected = {(h, frozenset(pair)) for h in ks.heavy for pair in combinations(ks.lesser, 2)}
                assert len(queries) == heavy_count * comb(lesser_count, 2) == enumeration_size(ks)
                assert {(q.heavy_term, frozenset(q.lesser_terms)) for q in queries} == expected
                assert len({q.rendered for q in queries}) == len(queries)
                assert all(q.rendered.count(QUERY_SEPARATOR) == 2 for q in queries)

    def test_heavy_order_major(self):
        ks = KeywordSet(topic_id="t", heavy=("zeta", "alpha"), lesser=("b", "a", "c"))
        queries = enumerate_queries(ks)
        assert [q.heavy_term for q in queries] == ["zeta"] * 3 + ["alpha"] * 3
        assert [q.lesser_terms for q in queries[:3]] == [("a", "b"), ("a", "c"), ("b", "c")]

    def test_multi_word_terms_kept_verbatim(self):
        ks = KeywordSet(topic_id="t", heavy=("green card",), lesser=("wait time", "uscis"))
        (query,) = enumerate_queries(ks)
        assert query.rendered == "green card AND uscis AND wait time"
        assert query.rendered == query.rendered.strip()


class TestSampleQueries:
    def test_seeded_determinism(self):
        ks = keyword_set(3, 4)
        assert sample_queries(ks, 5, seed=42) == sample_queries(ks, 5, seed=42)

    def test_sample_is_subset_without_repeats(self):
        ks = keyword_set(4, 6)
        universe = {q.rendered for q in enumerate_queries(ks)}
        for seed in range(20):
            plan = sample_queries(ks, 10, seed)
            rendered = [q.rendered for q in plan.queries]
            assert len(rendered) == len(set(rendered)) == 10
            assert set(rendered) <= universe
            assert not plan.truncated

    def test_exhaustion(self):
        ks = keyword_set(3, 4)
        plan = sample_queries(ks, 18, seed=1)
        assert set(plan.queries) == set(enumerate_queries(ks))
        assert not plan.truncated

    def test_truncation_is_flagged(self):
        ks = keyword_set(1, 3)
        plan = sample_queries(ks, 25, seed=1)
        assert len(plan.queries) == 3
        assert plan.truncated
        assert plan.requested_count == 25

    def test_inclusion_is_uniform(self):
        ks = keyword_set(3, 4)
        counts = Counter()
        trials = 1000
        for seed in range(trials):
            counts.update(q.rendered for q in sample_queries(ks, 5, seed).queries)
        assert len(counts) == 18
        for rendered in counts:
            assert abs(counts[rendered] / trials - 5 / 18) < 0.05

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_queries(keyword_set(1, 2), 0, seed=0)
