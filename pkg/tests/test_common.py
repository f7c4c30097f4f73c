import os
from datetime import datetime, timezone
from unittest.mock import patch

import pytest

from syndy.common.errors import StageError, ValidationError
from syndy.common.events import EventEmitter, StageEvent
from syndy.common.logging_config import is_debug_enabled, truncate_for_log
from syndy.common.records import (
    claim_id_of,
    read_jsonl,
    read_jsonl_dicts,
    sort_key,
    validate_raw,
    validate_record,
    write_jsonl,
)
from syndy.common.text import content_hash, fold_key, normalize_text, split_sentences, token_count, truncate_at_sentence
from syndy.common.types import (
    GENERATED_POST_ID,
    ClaimTuple,
    ClusterRecord,
    KeywordSet,
    Post,
    Query,
    RelationLabel,
    RelationTuple,
    Topic,
    TopicTuple,
)
from syndy.common.utils import canonical_json, digest_of


def make_post(post_id="local:1", text="Vaccines cause autism according to a viral post.") -> Post:
    return Post(
        post_id=post_id,
        source_id="local",
        text=text,
        fetched_at=datetime(2024, 3, 1, 12, 0, 0, 123456, tzinfo=timezone.utc),
        query_ref="vaccine AND autism AND viral",
        topic_id="vaccines",
    )


def make_claim(post_id="local:1", text="Vaccines cause autism.") -> ClaimTuple:
    return ClaimTuple(claim_id=claim_id_of(post_id, text), post_id=post_id, claim_text=text)


class TestText:
    def test_normalize_collapses_whitespace_and_nfc(self):
        assert normalize_text("  élan \n\t vital  ") == "élan vital"

    def test_fold_key_is_case_insensitive(self):
        assert fold_key("COVID  Vaccine") == fold_key("covid vaccine")

    def test_content_hash_ignores_whitespace_runs(self):
        assert content_hash("a  b") == content_hash(" a b ")

    def test_token_count(self):
        assert token_count("") == 0
        assert token_count("one two   three") == 3

    def test_split_sentences(self):
        assert split_sentences("Is it true? It is. Really!") == ["Is it true?", "It is.", "Really!"]

    def test_truncate_prefers_sentence_boundary(self):
        text = "First sentence here. Second sentence is much longer than the first."
        clipped, truncated = truncate_at_sentence(text, 30)
        assert truncated
        assert clipped == "First sentence here."

    def test_truncate_falls_back_to_word_boundary(self):
        clipped, truncated = truncate_at_sentence("averyverylongword another word", 20)
        assert truncated
        assert clipped == "averyverylongword"

    def test_no_truncation_when_short(self):
        assert truncate_at_sentence("short", 10) == ("short", False)


class TestIdentity:
    def test_claim_id_is_deterministic(self):
        assert claim_id_of("p1", "Claim  text") == claim_id_of("p1", "Claim text")
        assert claim_id_of("p1", "Claim text") != claim_id_of("p2", "Claim text")
        assert claim_id_of("p1", "Claim text").startswith("c_")

    def test_claim_id_requires_content(self):
        with pytest.raises(ValidationError):
            claim_id_of("p1", "   ")
        with pytest.raises(ValidationError):
            claim_id_of("", "text")

    def test_topic_slug(self):
        assert Topic.from_title("Vaccine  Safety!").topic_id == "vaccine-safety"
        assert Topic.from_title("???").topic_id.startswith("topic-")

    def test_query_build_orders_lesser_pair(self):
        q = Query.build("t", "vaccine", "Zinc", "autism")
        assert q.lesser_terms == ("autism", "Zinc")
        assert q.rendered == "vaccine AND autism AND Zinc"
        assert validate_record(q) == []

    def test_canonical_json_and_digest(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
        assert digest_of({"a": 1, "b": 2}) == digest_of({"b": 2, "a": 1})


class TestValidation:
    def test_valid_records(self):
        post = make_post()
        claim = make_claim()
        assert validate_record(post) == []
        assert validate_record(claim, post_ids={post.post_id}) == []
        assert validate_record(TopicTuple(post_id=post.post_id, topic_label="vaccines"), post_ids={post.post_id}) == []

    def test_post_timestamp_is_utc_seconds(self):
        post = make_post()
        assert post.model_dump(mode="json")["fetched_at"] == "2024-03-01T12:00:00Z"

    def test_claim_id_mismatch(self):
        claim = ClaimTuple(claim_id="c_wrong", post_id="p1", claim_text="Something")
        assert validate_record(claim) == ["claim_id does not match content"]

    def test_dangling_references(self):
        claim = make_claim(post_id="missing")
        assert "dangling post_id missing" in validate_record(claim, post_ids={"local:1"})
        relation = RelationTuple(source_claim_id="c_a", target_claim_id="c_b", relation=RelationLabel.SUPPORT)
        violations = validate_record(relation, claim_ids={"c_a"})
        assert violations == ["dangling target_claim_id c_b"]

    def test_generated_claims_need_no_post(self):
        claim = make_claim(post_id=GENERATED_POST_ID, text="It is true that vaccines work.")
        assert validate_record(claim, post_ids=set()) == []

    def test_self_relation(self):
        relation = RelationTuple(source_claim_id="c_a", target_claim_id="c_a", relation=RelationLabel.UNDERMINE)
        assert "self-relation" in validate_record(relation)

    def test_unknown_label_in_raw_row(self):
        violations = validate_raw(RelationTuple, {"source_claim_id": "c_a", "target_claim_id": "c_b", "relation": "Refute"})
        assert violations == ["unknown label 'Refute'"]

    def test_every_violation_reported(self):
        violations = validate_raw(ClusterRecord, {"claim_id": "", "cluster_id": -1, "representative_claim_id": "x", "z": 1})
        assert "empty claim_id" in violations
        assert "cluster_id must be a nonnegative integer" in violations
        assert "unexpected fields ['z']" in violations

    def test_keyword_set_violations(self):
        ks = KeywordSet(topic_id="t", heavy=("vaccine", "Vaccine"), lesser=("vaccine",))
        violations = validate_record(ks)
        assert "duplicate heavy keyword" in violations
        assert "lesser keyword list needs at least 2 terms" in violations
        assert "heavy and lesser overlap: ['vaccine']" in violations


class TestJsonl:
    def test_write_and_read(self, tmp_path):
        claims = [make_claim("p2", "B claim."), make_claim("p1", "A claim.")]
        path = tmp_path / "claims.jsonl"
        assert write_jsonl(path, sorted(claims, key=sort_key)) == 2
        loaded = read_jsonl(path, ClaimTuple)
        assert loaded == sorted(claims, key=sort_key)

    def test_relation_label_serialized_as_string(self, tmp_path):
        path = tmp_path / "relations.jsonl"
        write_jsonl(path, [RelationTuple(source_claim_id="c_a", target_claim_id="c_b", relation=RelationLabel.SUPPORT)])
        assert read_jsonl_dicts(path) == [{"source_claim_id": "c_a", "target_claim_id": "c_b", "relation": "Support"}]

    def test_invalid_line_names_its_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"a": 1}\n{oops\n', encoding="utf-8")
        with pytest.raises(ValidationError, match="bad.jsonl:2"):
            read_jsonl_dicts(path)

    def test_missing_file_is_a_stage_error(self, tmp_path):
        with pytest.raises(StageError):
            read_jsonl(tmp_path / "missing.jsonl", ClaimTuple)


def test_event_emitter():
    emitter = EventEmitter()
    seen = []
    emitter.on(StageEvent.COMPLETED, seen.append)
    emitter.emit("stage_completed", {"stage": "fetch"})
    emitter.off(StageEvent.COMPLETED, seen.append)
    emitter.emit(StageEvent.COMPLETED, {"stage": "split"})
    assert seen == [{"stage": "fetch"}]


def test_debug_flag_from_environment():
    with patch.dict(os.environ, {"SYNDY_DEBUG": "1"}):
        assert is_debug_enabled()


def test_truncate_for_log():
    assert truncate_for_log("abc", max_length=10) == "abc"
    assert len(truncate_for_log("x" * 5000, max_length=100)) < 200
