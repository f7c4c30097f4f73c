"""
Pipeline configuration.

One JSON document whose schema is PipelineConfig. Every section is optional;
a minimal {"topic": "..."} is accepted and normalized into `topics`.
Credentials never appear here: providers read them from the environment
variables named by the `api_key_env` keys.
"""

import json
from math import isclose
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from syndy.common.errors import ValidationError
from syndy.common.logging_config import get_logger
from syndy.common.types import ClusterConfig, EmbeddingConfig, LlmConfig, SourceConfig, Topic

logger = get_logger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KeywordsSection(_Section):
    heavy_n: int = Field(default=10, ge=1)
    lesser_n: int = Field(default=20, ge=2)
    retry_budget: int = Field(default=3, ge=1)


class QueriesSection(_Section):
    per_topic: int = Field(default=25, ge=1)


class AnnotationSection(_Section):
    candidate_labels: List[str] = Field(default_factory=list)
    allow_free_form: bool = False
    failure_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    max_claim_chars: int = Field(default=400, gt=0)


class SplitSection(_Section):
    train: float = Field(default=0.8, ge=0.0)
    dev: float = Field(default=0.1, ge=0.0)
    test: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def _sums_to_one(self) -> "SplitSection":
        if not isclose(self.train + self.dev + self.test, 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise ValueError("proportions must sum to 1")
        return self

    def proportions(self) -> Dict[str, float]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


class EvalSection(_Section):
    k: int = Field(default=20, ge=1)


class PipelineConfig(_Section):
    topics: List[Topic] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0, lt=2**64)
    out_dir: str = "dataset"
    work_dir: str = ".syndy"
    keywords: KeywordsSection = Field(default_factory=KeywordsSection)
    queries: QueriesSection = Field(default_factory=QueriesSection)
    source: SourceConfig = Field(default_factory=SourceConfig)
    llm: LlmConfig = Field(default_factory=LlmConfig)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    annotation: AnnotationSection = Field(default_factory=AnnotationSection)
    clustering: ClusterConfig = Field(default_factory=ClusterConfig)
    split: SplitSection = Field(default_factory=SplitSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="before")
    @classmethod
    def _single_topic(cls, data: Any) -> Any:
        if isinstance(data, dict) and "topic" in data:
            data = dict(data)
            topic = data.pop("topic")
            data["topics"] = [topic, *data.get("topics", [])]
        return data

    @field_validator("topics", mode="before")
    @classmethod
    def _topic_titles(cls, v: Any) -> Any:
        if not isinstance(v, list):
            return v
        topics = []
        for item in v:
            if isinstance(item, str):
                topics.append(Topic.from_title(item))
            elif isinstance(item, dict) and "topic_id" not in item and item.get("title"):
                topics.append(Topic.from_title(item["title"], item.get("description")))
            else:
                topics.append(item)
        return topics

    @field_validator("topics")
    @classmethod
    def _distinct_topics(cls, v: List[Topic]) -> List[Topic]:
        ids = [t.topic_id for t in v]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate topic ids {duplicates}")
        return v

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


def _violation(error: Dict[str, Any]) -> str:
    message = str(error["msg"]).removeprefix("Value error, ")
    loc = ".".join(str(part) for part in error["loc"])
    return f"{loc}: {message}" if loc else message


def config_from_dict(data: Dict[str, Any]) -> Tuple[Optional[PipelineConfig], List[str]]:
    if not isinstance(data, dict):
        return None, ["config must be a JSON object"]
    try:
        return PipelineConfig.model_validate(data), []
    except PydanticValidationError as e:
        return None, [_violation(error) for error in e.errors()]


def validate_config(path: Path) -> Tuple[Optional[PipelineConfig], List[str]]:
    """
    Normalized config with every default applied, or every violation found.

    Violations are returned, never raised.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        return None, [f"cannot read {path}: {e.strerror or e}"]
    except json.JSONDecodeError as e:
        return None, [f"{path}:{e.lineno}: invalid JSON: {e.msg}"]

    config, violations = config_from_dict(data)
    if violations:
        logger.debug(f"Config {path} has {len(violations)} violations")
    return config, violations


def load_config(path: Optional[Path] = None) -> PipelineConfig:
    """Config from a file (defaults when path is None); raises ValidationError with every violation."""
    if path is None:
        return PipelineConfig()
    config, violations = validate_config(path)
    if config is None:
        raise ValidationError(f"invalid config {path}", violations)
    return config


def apply_overrides(config: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """
    Override config keys from command-line flags.

    Keys are dotted paths ("clustering.tau"); None values are ignored. The
    result is validated again, so an out-of-range flag is reported like a
    bad config value.
    """
    data = config.model_dump(mode="json")
    changed = False
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        section = data
        for part in parents:
            section = section.setdefault(part, {})
        section[leaf] = value
        changed = True
    if not changed:
        return config

    updated, violations = config_from_dict(data)
    if updated is None:
        raise ValidationError("invalid command-line override", violations)
    return updated


def normalized_config_text(config: PipelineConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
