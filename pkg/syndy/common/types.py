import re
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

from syndy.common.text import fold_key, normalize_text
from syndy.common.utils import sha256_hex

SCHEMA_VERSION = "1.0"

# post_id carried by claims the LLM authored as relation targets
GENERATED_POST_ID = "generated"

QUERY_SEPARATOR = " AND "


class RelationLabel(str, Enum):
    SUPPORT = "Support"
    UNDERMINE = "Undermine"


class JobKind(str, Enum):
    KEYWORDS = "Keywords"
    CLAIM_EXTRACT = "ClaimExtract"
    TOPIC_LABEL = "TopicLabel"
    RELATION_GEN = "RelationGen"


class SplitName(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


class SourceKind(str, Enum):
    LOCAL = "local"  # directory of *.jsonl raw posts
    HTTP = "http"  # generic JSON search endpoint
    REDDIT = "reddit"  # Reddit search listing
    POSTS_FILE = "posts_file"  # externally supplied posts.jsonl, selection skipped


class RepresentativeRule(str, Enum):
    MEDOID = "medoid"


class _Record(BaseModel):
    """Immutable value shared between stages."""

    model_config = ConfigDict(frozen=True)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


class Topic(_Record):
    topic_id: str
    title: str
    description: Optional[str] = None

    @field_validator("title")
    @classmethod
    def _normalize_title(cls, v: str) -> str:
        return normalize_text(v)

    @classmethod
    def from_title(cls, title: str, description: Optional[str] = None) -> "Topic":
        return cls(topic_id=slugify(title), title=title, description=description)


class KeywordSet(_Record):
    topic_id: str
    heavy: Tuple[str, ...]
    lesser: Tuple[str, ...]


class Query(_Record):
    topic_id: str
    heavy_term: str
    lesser_terms: Tuple[str, str]
    rendered: str

    @property
    def terms(self) -> Tuple[str, str, str]:
        return (self.heavy_term, *self.lesser_terms)

    @classmethod
    def build(cls, topic_id: str, heavy_term: str, lesser_a: str, lesser_b: str) -> "Query":
        pair = tuple(sorted((lesser_a, lesser_b), key=lambda t: (fold_key(t), t)))
        rendered = QUERY_SEPARATOR.join(normalize_text(t) for t in (heavy_term, *pair))
        return cls(topic_id=topic_id, heavy_term=heavy_term, lesser_terms=pair, rendered=rendered)


class QueryPlan(_Record):
    topic_id: str
    requested_count: int
    seed: int
    queries: Tuple[Query, ...]
    truncated: bool = False
    sampling: str = "uniform_without_replacement"


class SourceConfig(BaseModel):
    source_id: str = "local"
    kind: SourceKind = SourceKind.LOCAL
    endpoint: Optional[str] = None  # base URL, corpus directory or posts file
    page_size: int = Field(default=25, gt=0)
    max_posts_per_query: int = Field(default=100, gt=0)
    requests_per_minute: int = Field(default=60, gt=0)
    max_attempts: int = Field(default=4, ge=1)
    base_delay: float = Field(default=1.0, gt=0)
    multiplier: float = Field(default=2.0, gt=0)
    max_in_flight: int = Field(default=4, gt=0)
    min_tokens: int = Field(default=3, ge=0)
    api_key_env: str = "SYNDY_SOURCE_API_KEY"


class Post(_Record):
    post_id: str
    source_id: str
    text: str
    url: Optional[str] = None
    fetched_at: datetime
    query_ref: str
    topic_id: str

    @field_validator("fetched_at")
    @classmethod
    def _utc_seconds(cls, v: datetime) -> datetime:
        if v.tzinfo is None:
            v = v.replace(tzinfo=timezone.utc)
        return v.astimezone(timezone.utc).replace(microsecond=0)

    @field_serializer("fetched_at")
    def _iso_z(self, v: datetime) -> str:
        return v.strftime("%Y-%m-%dT%H:%M:%SZ")


class FetchReport(BaseModel):
    requests: int = 0
    retrieved: int = 0
    duplicates: int = 0
    too_short: int = 0
    failed_queries: Dict[str, str] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Annotation tuples
# ---------------------------------------------------------------------------


class ClaimTuple(_Record):
    claim_id: str
    post_id: str
    claim_text: str


class TopicTuple(_Record):
    post_id: str
    topic_label: str


class RelationTuple(_Record):
    source_claim_id: str
    target_claim_id: str
    relation: RelationLabel

    @field_serializer("relation")
    def _label(self, v: RelationLabel) -> str:
        return v.value if isinstance(v, RelationLabel) else str(v)


class AnnotationStats(BaseModel):
    processed: int = 0
    failed: int = 0
    parse_failures: int = 0
    rejected_labels: int = 0
    truncated_claims: int = 0
    self_relations: int = 0


# ---------------------------------------------------------------------------
# LLM jobs
# ---------------------------------------------------------------------------


class LlmRequest(BaseModel):
    kind: JobKind
    system: str
    user: str
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=1024, gt=0)
    model: str = "mock"
    # job inputs the prompt was rendered from; not sent on the wire
    inputs: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("user")
    @classmethod
    def _user_nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("user text must be nonempty")
        return v


class LlmResponse(BaseModel):
    raw: str
    payload: Optional[Dict[str, Any]] = None
    attempts: int = 1
    latency_seconds: float = 0.0
    parse_error: Optional[str] = None


class LlmConfig(BaseModel):
    provider: Literal["mock", "http"] = "mock"
    model: str = "mock"
    endpoint: Optional[str] = None
    api_key_env: str = "SYNDY_LLM_API_KEY"
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=1024, gt=0)
    max_attempts: int = Field(default=4, ge=1)
    base_delay: float = Field(default=1.0, gt=0)
    multiplier: float = Field(default=2.0, gt=0)
    requests_per_minute: int = Field(default=60, gt=0)
    max_in_flight: int = Field(default=4, gt=0)
    # fixture directory of the mock provider
    mock_dir: Optional[str] = None
    # "rules": answer from the offline responder when no fixture exists
    mock_fallback: Optional[Literal["rules"]] = None


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


class EmbeddingVector(_Record):
    dim: int
    values: Tuple[float, ...]


class EmbeddingConfig(BaseModel):
    provider: Literal["hash", "http"] = "hash"
    model: str = "hash"
    dim: int = Field(default=64, gt=0)
    endpoint: Optional[str] = None
    api_key_env: str = "SYNDY_EMBEDDING_API_KEY"
    batch_size: int = Field(default=64, gt=0)
    max_attempts: int = Field(default=4, ge=1)
    base_delay: float = Field(default=1.0, gt=0)
    multiplier: float = Field(default=2.0, gt=0)


class ClusterConfig(BaseModel):
    tau: float = 0.95
    similarity: str = "cosine"
    representative: RepresentativeRule = RepresentativeRule.MEDOID

    @field_validator("tau")
    @classmethod
    def _tau_range(cls, v: float) -> float:
        if not (0.0 < v <= 1.0):
            raise ValueError("tau out of (0,1]")
        return v

    @field_validator("similarity")
    @classmethod
    def _cosine_only(cls, v: str) -> str:
        if v != "cosine":
            raise ValueError("similarity must be cosine")
        return v


class ClusterAssignment(_Record):
    claim_to_cluster: Dict[str, int]
    representatives: Dict[int, str]

    def cluster_of(self, claim_id: str) -> int:
        return self.claim_to_cluster[claim_id]

    def representative_of(self, claim_id: str) -> str:
        return self.representatives[self.claim_to_cluster[claim_id]]

    def members(self) -> Dict[int, List[str]]:
        grouped: Dict[int, List[str]] = {}
        for claim_id, cluster_id in sorted(self.claim_to_cluster.items()):
            grouped.setdefault(cluster_id, []).append(claim_id)
        return grouped


class ClusterRecord(_Record):
    claim_id: str
    cluster_id: int
    representative_claim_id: str


class RewriteStats(BaseModel):
    self_relations: int = 0
    duplicates: int = 0
    conflicts: int = 0


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


class SplitBundle(BaseModel):
    name: SplitName
    posts: List[Post] = Field(default_factory=list)
    claims: List[ClaimTuple] = Field(default_factory=list)
    topics: List[TopicTuple] = Field(default_factory=list)
    relations: List[RelationTuple] = Field(default_factory=list)
    clusters: List[ClusterRecord] = Field(default_factory=list)

    @property
    def cluster_ids(self) -> set:
        return {c.cluster_id for c in self.clusters}


class SplitStats(BaseModel):
    units: Dict[str, int] = Field(default_factory=dict)
    cross_split_relations: int = 0


class ProviderInfo(BaseModel):
    provider: str
    model: str


class DatasetManifest(BaseModel):
    schema_version: str = SCHEMA_VERSION
    seed: int
    providers: Dict[str, ProviderInfo]
    prompt_version: str
    template_digest: str
    topics: List[Topic]
    tau: float
    similarity: str = "cosine"
    representative_rule: str = RepresentativeRule.MEDOID.value
    relation_steering: str = "balanced"
    proportions: Dict[str, float]
    counts: Dict[str, Dict[str, int]]
    digests: Dict[str, str]
    split_stats: SplitStats = Field(default_factory=SplitStats)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class QrelsQuery(BaseModel):
    query_id: str
    text: str


class QrelsCandidate(BaseModel):
    cand_id: str
    text: str


class Qrels(BaseModel):
    queries: List[QrelsQuery]
    candidates: List[QrelsCandidate]
    relevance: List[Tuple[str, str]] = Field(default_factory=list)

    def relevant_for(self, query_id: str) -> set:
        return {c for q, c in self.relevance if q == query_id}


class Ranking(BaseModel):
    """query_id -> [(cand_id, score), ...] in descending score order."""

    ranked: Dict[str, List[Tuple[str, float]]] = Field(default_factory=dict)

    def cand_ids(self, query_id: str) -> List[str]:
        return [cand for cand, _ in self.ranked.get(query_id, [])]


class ClassScores(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int


class EvalReport(BaseModel):
    task: str
    k: Optional[int] = None
    map_at_k: Optional[float] = None
    per_query_ap: Dict[str, float] = Field(default_factory=dict)
    per_class: Dict[str, ClassScores] = Field(default_factory=dict)
    macro_f1: Optional[float] = None
    query_count: int = 0
    item_count: int = 0
    skipped_queries: int = 0
    config: Dict[str, Any] = Field(default_factory=dict)


_SLUG = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    slug = _SLUG.sub("-", fold_key(text)).strip("-")
    return slug or f"topic-{sha256_hex(normalize_text(text))[:8]}"
