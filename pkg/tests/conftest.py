import json
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import pytest

from syndy.agents.templates import build_request
from syndy.common.types import JobKind, LlmRequest, Topic
from syndy.integration.llm_client import LlmClient, record_fixture
from syndy.integration.rate_limiter import RetryPolicy
from syndy.orchestration.config import PipelineConfig


def no_sleep(seconds: float) -> None:
    return None


class ScriptedProvider:
    """Chat provider answering from a script: outcomes are consumed in order, the last one repeats."""

    name = "scripted"

    def __init__(self, *outcomes: Union[str, Exception], handler: Optional[Callable[[LlmRequest], str]] = None):
        self.outcomes = list(outcomes)
        self.handler = handler
        self.calls = 0
        self.requests: List[LlmRequest] = []

    def chat(self, req: LlmRequest) -> str:
        self.calls += 1
        self.requests.append(req)
        if self.handler is not None:
            return self.handler(req)
        outcome = self.outcomes[min(self.calls - 1, len(self.outcomes) - 1)]
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def make_client(provider, max_attempts: int = 4, max_in_flight: int = 4) -> LlmClient:
    return LlmClient(
        provider,
        retry=RetryPolicy(max_attempts=max_attempts, base_delay=0.001, multiplier=2.0),
        sleep=no_sleep,
        max_in_flight=max_in_flight,
    )


class FakeClock:
    def __init__(self, start: float = 0.0):
        self.now = start
        self.sleeps: List[float] = []

    def __call__(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.now += seconds


@pytest.fixture
def clock():
    return FakeClock()


# ---------------------------------------------------------------------------
# Offline world: three topics, a local corpus and keyword fixtures
# ---------------------------------------------------------------------------

WORLD: Dict[str, Dict] = {
    "vaccine safety": {
        "heavy": ["vaccine", "booster"],
        "lesser": ["clinic", "pharmacy", "dose"],
        "question": "Is vaccine safety settled for every booster dose at the clinic and pharmacy?",
        "claims": [
            "The new shot causes severe headaches.",
            "Pharmacies ran out of flu shots.",
            "Clinic staff hid adverse event reports.",
            "Children received double injections by mistake.",
            "The injection contains tracking microchips.",
            "Nurses quit over mandatory shots.",
        ],
    },
    "election fraud": {
        "heavy": ["ballot", "election"],
        "lesser": ["county", "poll", "tally"],
        "question": "Did election fraud touch any ballot tally at the county poll?",
        "claims": [
            "Dead voters cast thousands of votes.",
            "Voting machines flipped results overnight.",
            "Mail envelopes arrived after the deadline.",
            "Campaigns paid the volunteers in secret.",
            "Turnout exceeded registered voters downtown.",
            "Observers were blocked from counting rooms.",
        ],
    },
    "climate change": {
        "heavy": ["climate", "emissions"],
        "lesser": ["summer", "ocean", "glacier"],
        "question": "Is climate change behind the emissions records for summer ocean and glacier data?",
        "claims": [
            "Arctic ice grew larger this year.",
            "Sea levels have stopped rising.",
            "Carbon dioxide is plant food.",
            "Heat waves come from solar flares.",
            "Wind turbines kill more birds than cats.",
            "Scientists faked temperature records.",
        ],
    },
}

HEAVY_N = 2
LESSER_N = 3


def keyword_request(topic: Topic, heavy_n: int = HEAVY_N, lesser_n: int = LESSER_N) -> LlmRequest:
    """The first keyword request generate_keywords sends for a topic."""
    inputs = {
        "topic": topic.title,
        "description": topic.description,
        "heavy_n": heavy_n,
        "lesser_n": lesser_n,
        "exclude": [],
    }
    return build_request(JobKind.KEYWORDS, inputs, "mock")


def write_world(root: Path) -> Dict[str, Path]:
    """Corpus directory and mock fixture directory for the three topics."""
    corpus = root / "corpus"
    mock_dir = root / "fixtures"
    corpus.mkdir(parents=True)
    rows = []
    for t, (title, topic) in enumerate(WORLD.items()):
        for i, claim in enumerate(topic["claims"]):
            rows.append({"id": f"t{t}p{i}", "text": f"{topic['question']} {claim}", "url": f"https://example.org/{t}/{i}"})
        record_fixture(
            mock_dir,
            keyword_request(Topic.from_title(title)),
            json.dumps({"heavy": topic["heavy"], "lesser": topic["lesser"]}),
        )
    # a repost of the first post under another id
    rows.append({"id": "repost", "text": rows[0]["text"]})
    # unrelated chatter
    rows.append({"id": "noise", "text": "Nice weather today for a picnic in the park."})
    with open(corpus / "posts.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return {"corpus": corpus, "mock_dir": mock_dir}


def world_config(root: Path, name: str = "run", **updates) -> PipelineConfig:
    paths = write_world(root) if not (root / "corpus").exists() else {"corpus": root / "corpus", "mock_dir": root / "fixtures"}
    data = {
        "topics": list(WORLD),
        "seed": 7,
        "out_dir": str(root / name / "dataset"),
        "work_dir": str(root / name / "work"),
        "keywords": {"heavy_n": HEAVY_N, "lesser_n": LESSER_N},
        "queries": {"per_topic": 4},
        "source": {"kind": "local", "endpoint": str(paths["corpus"])},
        "llm": {"provider": "mock", "mock_dir": str(paths["mock_dir"]), "mock_fallback": "rules"},
        "embedding": {"provider": "hash", "dim": 64},
    }
    data.update(updates)
    return PipelineConfig.model_validate(data)


@pytest.fixture
def world(tmp_path):
    """Factory for pipeline configs over the offline world; each name gets its own work and out dirs."""

    def factory(name: str = "run", **updates) -> PipelineConfig:
        return world_config(tmp_path, name, **updates)

    return factory
