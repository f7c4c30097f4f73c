"""
Pipeline Runner - staged dataset generation with checkpoints.

Stages run sequentially:
    keywords -> queries -> fetch -> annotate -> cluster -> split -> emit

Every stage output is checkpointed under <work_dir>/cache/ and keyed by the
digest of (stage config, key of the preceding stage, prompt templates). A
rerun with unchanged inputs restores every stage without a provider call;
changing a stage's config recomputes that stage and everything after it.

With source.kind = "posts_file" the selection stages are skipped and the
posts are read from source.endpoint.

A run writes <work_dir>/run_report.json, also when a stage fails.
"""

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import BaseModel, Field

from syndy.agents.annotator import Annotator, RelationResult
from syndy.agents.keywords import generate_keywords
from syndy.clustering.semcluster import cluster_claims, rewrite_relations
from syndy.common.errors import StageError, SyndyError, ValidationError
from syndy.common.events import EventEmitter, StageEvent
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import read_jsonl
from syndy.common.types import (
    AnnotationStats,
    ClaimTuple,
    ClusterAssignment,
    DatasetManifest,
    FetchReport,
    JobKind,
    KeywordSet,
    Post,
    ProviderInfo,
    QueryPlan,
    RelationTuple,
    RewriteStats,
    SourceKind,
    SplitBundle,
    SplitName,
    SplitStats,
    TopicTuple,
)
from syndy.common.utils import digest_of, file_digest
from syndy.dataset.emitter import MANIFEST_FILE, load_manifest, verify_manifest
from syndy.dataset.emitter import emit as emit_dataset
from syndy.dataset.splitter import SPLIT_ORDER, split
from syndy.integration.embeddings import Embedder, make_embedder
from syndy.integration.llm_client import LlmClient, make_llm_client
from syndy.integration.sources import SearchSource
from syndy.orchestration.config import PipelineConfig
from syndy.orchestration.stage_cache import StageCache
from syndy.selection.fetcher import PostFetcher, dedup_posts
from syndy.selection.queries import sample_queries

logger = get_logger(__name__)

STAGES = ("keywords", "queries", "fetch", "annotate", "cluster", "split", "emit")
SELECTION_STAGES = ("keywords", "queries")
RUN_REPORT_FILE = "run_report.json"
EMBEDDING_CACHE_DIR = "embeddings"


class StageStatus(str, Enum):
    COMPUTED = "computed"
    CACHED = "cached"
    SKIPPED = "skipped"
    FAILED = "failed"


class StageReport(BaseModel):
    status: StageStatus
    key: Optional[str] = None
    duration_seconds: float = 0.0
    error: Optional[str] = None


class RunReport(BaseModel):
    stages: Dict[str, StageReport] = Field(default_factory=dict)
    provider_calls: Dict[str, int] = Field(default_factory=dict)
    counters: Dict[str, int] = Field(default_factory=dict)
    out_dir: Optional[str] = None
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def statuses(self) -> Dict[str, str]:
        return {stage: report.status.value for stage, report in self.stages.items()}


@dataclass
class PipelineState:
    """Stage outputs of the current run, computed or restored."""

    keyword_sets: List[KeywordSet] = field(default_factory=list)
    plans: List[QueryPlan] = field(default_factory=list)
    posts: List[Post] = field(default_factory=list)
    fetch_report: FetchReport = field(default_factory=FetchReport)
    claims: List[ClaimTuple] = field(default_factory=list)
    targets: List[ClaimTuple] = field(default_factory=list)
    topics: List[TopicTuple] = field(default_factory=list)
    relations: List[RelationTuple] = field(default_factory=list)
    annotation_stats: Dict[str, AnnotationStats] = field(default_factory=dict)
    assignment: Optional[ClusterAssignment] = None
    clustered_relations: List[RelationTuple] = field(default_factory=list)
    rewrite_stats: RewriteStats = field(default_factory=RewriteStats)
    bundles: Dict[SplitName, SplitBundle] = field(default_factory=dict)
    split_stats: SplitStats = field(default_factory=SplitStats)
    manifest: Optional[DatasetManifest] = None

    @property
    def all_claims(self) -> List[ClaimTuple]:
        return self.claims + self.targets


def _source_fingerprint(config: PipelineConfig) -> Optional[str]:
    """Content digest of an offline corpus or posts file, so edited inputs invalidate the fetch stage."""
    source = config.source
    if not source.endpoint or source.kind not in (SourceKind.LOCAL, SourceKind.POSTS_FILE):
        return None
    path = Path(source.endpoint)
    if path.is_file():
        return file_digest(path)
    if path.is_dir():
        return digest_of([[p.name, file_digest(p)] for p in sorted(path.glob("*.jsonl"))])
    return None


class PipelineRunner(EventEmitter):
    """
    Runs the dataset pipeline stage by stage.

    Providers are created on first use, so a fully cached run never builds
    (or calls) an LLM, embedding or search client. Tests and callers may pass
    their own.
    """

    def __init__(
        self,
        config: PipelineConfig,
        llm: Optional[LlmClient] = None,
        embedder: Optional[Embedder] = None,
        source: Optional[SearchSource] = None,
    ):
        super().__init__()
        self.config = config
        self.cache = StageCache(config.work_path)
        self.state = PipelineState()
        self.report = RunReport(out_dir=str(config.out_path))
        self._llm = llm
        self._embedder = embedder
        self._source = source
        self._source_requests = 0

    # ------------------------------------------------------------------
    # Providers
    # ------------------------------------------------------------------

    @property
    def llm(self) -> LlmClient:
        if self._llm is None:
            self._llm = make_llm_client(self.config.llm)
        return self._llm

    @property
    def embedder(self) -> Embedder:
        if self._embedder is None:
            self._embedder = make_embedder(self.config.embedding, cache_dir=self.config.work_path / EMBEDDING_CACHE_DIR)
        return self._embedder

    def provider_calls(self) -> Dict[str, int]:
        return {
            "llm": self._llm.calls if self._llm is not None else 0,
            "embedding": self._embedder.calls if self._embedder is not None else 0,
            "source_requests": self._source_requests,
        }

    def _providers(self) -> Dict[str, ProviderInfo]:
        cfg = self.config
        embedding_model = cfg.embedding.model if cfg.embedding.provider == "http" else f"hash-{cfg.embedding.dim}"
        return {
            "llm": ProviderInfo(provider=cfg.llm.provider, model=cfg.llm.model),
            "embedding": ProviderInfo(provider=cfg.embedding.provider, model=embedding_model),
            "source": ProviderInfo(provider=cfg.source.kind.value, model=cfg.source.source_id),
        }

    # ------------------------------------------------------------------
    # Run
    # ------------------------------------------------------------------

    @property
    def uses_posts_file(self) -> bool:
        return self.config.source.kind == SourceKind.POSTS_FILE

    def run(self, until: str = "emit") -> RunReport:
        """Run every stage up to and including `until`; returns the run report."""
        if until not in STAGES:
            raise ValidationError(f"unknown stage {until!r}; expected one of {', '.join(STAGES)}")
        if not self.config.topics and not self.uses_posts_file:
            raise ValidationError("the pipeline needs at least one topic (or source.kind = posts_file)")

        log_separator(logger, f"PIPELINE: {len(self.config.topics)} topics, seed {self.config.seed}")
        upstream: Optional[str] = None
        try:
            for stage in STAGES[: STAGES.index(until) + 1]:
                upstream = self._run_stage(stage, upstream)
        finally:
            self._finish_report()
        return self.report

    def _run_stage(self, stage: str, upstream: Optional[str]) -> Optional[str]:
        if self.uses_posts_file and stage in SELECTION_STAGES:
            self.report.stages[stage] = StageReport(status=StageStatus.SKIPPED)
            logger.info(f"Stage {stage} skipped: posts supplied by {self.config.source.endpoint}")
            return upstream

        key = StageCache.key(stage, upstream, self._stage_config(stage))
        self.emit(StageEvent.STARTED, {"stage": stage, "key": key})
        started = time.monotonic()
        restore: Callable[[Dict[str, Any]], bool] = getattr(self, f"_restore_{stage}")
        compute: Callable[[], Dict[str, Any]] = getattr(self, f"_compute_{stage}")

        try:
            cached = self.cache.load(stage, key)
            if cached is not None and self._try_restore(stage, restore, cached):
                status = StageStatus.CACHED
            else:
                output = compute()
                self.cache.store(stage, key, output)
                restore(output)
                status = StageStatus.COMPUTED
        except SyndyError as e:
            self.report.stages[stage] = StageReport(
                status=StageStatus.FAILED, key=key, duration_seconds=time.monotonic() - started, error=str(e)
            )
            self.report.failed_stage = stage
            self.report.error = str(e)
            logger.error(f"Stage {stage} failed: {e}")
            self.emit(StageEvent.FAILED, {"stage": stage, "error": e})
            raise

        self.report.stages[stage] = StageReport(status=status, key=key, duration_seconds=time.monotonic() - started)
        event = StageEvent.CACHED if status == StageStatus.CACHED else StageEvent.COMPLETED
        self.emit(event, {"stage": stage, "key": key, "status": status})
        logger.info(f"Stage {stage} {status.value} ({key[:12]})")
        return key

    @staticmethod
    def _try_restore(stage: str, restore: Callable[[Dict[str, Any]], bool], cached: Dict[str, Any]) -> bool:
        try:
            return restore(cached)
        except (KeyError, TypeError, ValueError) as e:
            logger.warning(f"Checkpoint for {stage} does not match the current schema, recomputing: {e}")
            return False

    def _stage_config(self, stage: str) -> Any:
        cfg = self.config
        llm_identity = cfg.llm.model_dump(
            mode="json", include={"provider", "model", "endpoint", "temperature", "max_tokens", "mock_fallback"}
        )
        if stage == "keywords":
            return {
                "topics": [t.model_dump(mode="json") for t in cfg.topics],
                "keywords": cfg.keywords.model_dump(mode="json"),
                "llm": llm_identity,
            }
        if stage == "queries":
            return {"per_topic": cfg.queries.per_topic, "seed": cfg.seed}
        if stage == "fetch":
            return {
                "source": cfg.source.model_dump(mode="json", exclude={"api_key_env", "max_in_flight"}),
                "fingerprint": _source_fingerprint(cfg),
            }
        if stage == "annotate":
            return {
                "annotation": cfg.annotation.model_dump(mode="json"),
                "candidate_labels": self._candidate_labels(),
                "llm": llm_identity,
            }
        if stage == "cluster":
            return {
                "clustering": cfg.clustering.model_dump(mode="json"),
                "embedding": cfg.embedding.model_dump(mode="json", include={"provider", "model", "dim", "endpoint"}),
            }
        if stage == "split":
            return {"proportions": cfg.split.proportions(), "seed": cfg.seed}
        return {"out_dir": str(cfg.out_path), "providers": {k: v.model_dump() for k, v in self._providers().items()}}

    def _candidate_labels(self) -> List[str]:
        """Configured candidate labels; the topic titles when none are configured."""
        labels = self.config.annotation.candidate_labels or [t.title for t in self.config.topics]
        return sorted(set(labels))

    def _finish_report(self) -> None:
        state = self.state
        counters: Dict[str, int] = {
            "posts": len(state.posts),
            "posts_retrieved": state.fetch_report.retrieved,
            "posts_duplicate": state.fetch_report.duplicates,
            "posts_too_short": state.fetch_report.too_short,
            "failed_queries": len(state.fetch_report.failed_queries),
            "claims": len(state.claims),
            "generated_targets": len(state.targets),
            "relations_generated": len(state.relations),
            "relations_kept": len(state.clustered_relations),
            "relation_self_collapses": state.rewrite_stats.self_relations,
            "relation_duplicates": state.rewrite_stats.duplicates,
            "relation_conflicts": state.rewrite_stats.conflicts,
            "cross_split_relations": state.split_stats.cross_split_relations,
        }
        for kind, stats in sorted(state.annotation_stats.items()):
            for name, value in stats.model_dump().items():
                counters[f"{kind}.{name}"] = value
        self.report.counters = counters
        self.report.provider_calls = self.provider_calls()

        path = self.config.work_path / RUN_REPORT_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.debug(f"Run report written to {path}")

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def _compute_keywords(self) -> Dict[str, Any]:
        kw = self.config.keywords
        sets = [generate_keywords(t, kw.heavy_n, kw.lesser_n, self.llm, kw.retry_budget) for t in self.config.topics]
        return {"keyword_sets": [ks.model_dump(mode="json") for ks in sets]}

    def _restore_keywords(self, output: Dict[str, Any]) -> bool:
        self.state.keyword_sets = [KeywordSet.model_validate(d) for d in output["keyword_sets"]]
        return True

    def _compute_queries(self) -> Dict[str, Any]:
        plans = [sample_queries(ks, self.config.queries.per_topic, self.config.seed) for ks in self.state.keyword_sets]
        return {"plans": [plan.model_dump(mode="json") for plan in plans]}

    def _restore_queries(self, output: Dict[str, Any]) -> bool:
        self.state.plans = [QueryPlan.model_validate(d) for d in output["plans"]]
        return True

    def _compute_fetch(self) -> Dict[str, Any]:
        if self.uses_posts_file:
            endpoint = self.config.source.endpoint
            if not endpoint:
                raise StageError("fetch", "posts_file source needs source.endpoint (path of posts.jsonl)")
            posts, duplicates = dedup_posts(read_jsonl(Path(endpoint), Post))
            report = FetchReport(retrieved=len(posts) + duplicates, duplicates=duplicates)
        else:
            fetcher = PostFetcher(self.config.source, source=self._source)
            report = FetchReport()
            collected: List[Post] = []
            for plan in self.state.plans:
                result = fetcher.fetch(plan)
                collected.extend(result.posts)
                report.requests += result.report.requests
                report.retrieved += result.report.retrieved
                report.duplicates += result.report.duplicates
                report.too_short += result.report.too_short
                report.failed_queries.update(result.report.failed_queries)
            self._source_requests += report.requests
            # a post found for two topics is kept once, under the first topic
            posts, duplicates = dedup_posts(collected)
            report.duplicates += duplicates
        if not posts:
            raise StageError("fetch", "no posts retrieved")
        return {"posts": [p.model_dump(mode="json") for p in posts], "report": report.model_dump(mode="json")}

    def _restore_fetch(self, output: Dict[str, Any]) -> bool:
        self.state.posts = [Post.model_validate(d) for d in output["posts"]]
        self.state.fetch_report = FetchReport.model_validate(output["report"])
        return True

    def _compute_annotate(self) -> Dict[str, Any]:
        ann = self.config.annotation
        annotator = Annotator(self.llm, failure_threshold=ann.failure_threshold, max_claim_chars=ann.max_claim_chars)
        posts = self.state.posts
        claims = annotator.extract_claims(posts)
        topics = annotator.label_topics(posts, self._candidate_labels(), allow_free_form=ann.allow_free_form)
        relations = annotator.generate_relations(claims) if claims else RelationResult()
        return {
            "claims": [c.model_dump(mode="json") for c in claims],
            "targets": [c.model_dump(mode="json") for c in relations.targets],
            "topics": [t.model_dump(mode="json") for t in topics],
            "relations": [r.model_dump(mode="json") for r in relations.relations],
            "stats": {kind.value: stats.model_dump() for kind, stats in annotator.stats.items()},
        }

    def _restore_annotate(self, output: Dict[str, Any]) -> bool:
        self.state.claims = [ClaimTuple.model_validate(d) for d in output["claims"]]
        self.state.targets = [ClaimTuple.model_validate(d) for d in output["targets"]]
        self.state.topics = [TopicTuple.model_validate(d) for d in output["topics"]]
        self.state.relations = [RelationTuple.model_validate(d) for d in output["relations"]]
        self.state.annotation_stats = {
            JobKind(kind).name.lower(): AnnotationStats.model_validate(stats) for kind, stats in output["stats"].items()
        }
        return True

    def _compute_cluster(self) -> Dict[str, Any]:
        claims = self.state.all_claims
        if not claims:
            raise StageError("cluster", "no claims to cluster")
        assignment = cluster_claims(claims, self.embedder, self.config.clustering)
        rewrite = RewriteStats()
        relations = rewrite_relations(self.state.relations, assignment, rewrite)
        return {
            "assignment": assignment.model_dump(mode="json"),
            "relations": [r.model_dump(mode="json") for r in relations],
            "rewrite": rewrite.model_dump(),
        }

    def _restore_cluster(self, output: Dict[str, Any]) -> bool:
        self.state.assignment = ClusterAssignment.model_validate(output["assignment"])
        self.state.clustered_relations = [RelationTuple.model_validate(d) for d in output["relations"]]
        self.state.rewrite_stats = RewriteStats.model_validate(output["rewrite"])
        return True

    def _compute_split(self) -> Dict[str, Any]:
        state = self.state
        result = split(
            state.posts,
            state.all_claims,
            state.topics,
            state.clustered_relations,
            state.assignment,
            proportions=self.config.split.proportions(),
            seed=self.config.seed,
        )
        return {
            "bundles": [b.model_dump(mode="json") for b in result.ordered()],
            "stats": result.stats.model_dump(mode="json"),
        }

    def _restore_split(self, output: Dict[str, Any]) -> bool:
        bundles = [SplitBundle.model_validate(d) for d in output["bundles"]]
        self.state.bundles = {b.name: b for b in bundles}
        self.state.split_stats = SplitStats.model_validate(output["stats"])
        return set(self.state.bundles) == set(SPLIT_ORDER)

    def _compute_emit(self) -> Dict[str, Any]:
        cfg = self.config
        emit_dataset(
            self.state.bundles,
            cfg.out_path,
            seed=cfg.seed,
            topics=cfg.topics,
            tau=cfg.clustering.tau,
            proportions=cfg.split.proportions(),
            providers=self._providers(),
            split_stats=self.state.split_stats,
        )
        return {"manifest_digest": file_digest(cfg.out_path / MANIFEST_FILE)}

    def _restore_emit(self, output: Dict[str, Any]) -> bool:
        """The emitted tree counts as cached only while it is still on disk, unchanged."""
        out_dir = self.config.out_path
        manifest_path = out_dir / MANIFEST_FILE
        if not manifest_path.exists() or file_digest(manifest_path) != output["manifest_digest"]:
            return False
        manifest = load_manifest(out_dir)
        if verify_manifest(out_dir, manifest):
            return False
        self.state.manifest = manifest
        return True


def run_pipeline(config: PipelineConfig, until: str = "emit", **providers: Any) -> RunReport:
    return PipelineRunner(config, **providers).run(until=until)
