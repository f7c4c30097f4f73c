"""
Chat-completion providers and the retrying client the LLM jobs call.

Providers only move text: they take an LlmRequest and return the completion
verbatim. LlmClient adds rate limiting, retries, latency/attempt accounting
and structured parsing.
"""

import json
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Protocol

import httpx

from syndy.agents.response_parser import parse_structured
from syndy.agents.templates import build_request
from syndy.common.errors import AuthenticationError, ParseError, ProviderError, StageError, TransportError
from syndy.common.logging_config import get_logger, log_separator, truncate_for_log
from syndy.common.text import fold_key, normalize_text, split_sentences, token_count
from syndy.common.types import JobKind, LlmConfig, LlmRequest, LlmResponse, RelationLabel
from syndy.common.utils import sha256_hex
from syndy.integration.rate_limiter import RetryPolicy, SlidingWindowRateLimiter
from syndy.integration.sources import raise_for_provider_status

# Module logger
logger = get_logger(__name__)


class ChatProvider(Protocol):
    name: str

    def chat(self, req: LlmRequest) -> str: ...


# ---------------------------------------------------------------------------
# HTTP provider
# ---------------------------------------------------------------------------


def extract_completion_text(body: Any) -> str:
    """Completion text from the common vendor envelopes; empty string when none matches."""
    if isinstance(body, str):
        return body
    if not isinstance(body, dict):
        return ""
    choices = body.get("choices")
    if isinstance(choices, list) and choices:
        first = choices[0] if isinstance(choices[0], dict) else {}
        message = first.get("message")
        if isinstance(message, dict) and isinstance(message.get("content"), str):
            return message["content"]
        if isinstance(first.get("text"), str):
            return first["text"]
    content = body.get("content")
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if isinstance(content, str):
        return content
    for key in ("output_text", "text", "completion"):
        if isinstance(body.get(key), str):
            return body[key]
    return ""


class HttpChatProvider:
    """
    JSON-over-HTTP chat completion.

    Request: POST <endpoint> {model, messages: [{role, content}...], temperature, max_tokens}
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "SYNDY_LLM_API_KEY",
        client: Optional[httpx.Client] = None,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def chat(self, req: LlmRequest) -> str:
        body = {
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        try:
            response = self._client.post(self.endpoint, json=body, headers=self._headers())
        except httpx.TransportError as e:
            raise TransportError(f"llm: {e}") from e
        raise_for_provider_status(response, "llm")
        try:
            return extract_completion_text(response.json())
        except ValueError:
            return response.text


# ---------------------------------------------------------------------------
# Mock provider
# ---------------------------------------------------------------------------


def fixture_key(kind: JobKind, user: str) -> str:
    return sha256_hex(f"{kind.value}\x00{user}")[:32]


def fixture_path(mock_dir: Path, req: LlmRequest) -> Path:
    return Path(mock_dir) / f"{fixture_key(req.kind, req.user)}.txt"


def record_fixture(mock_dir: Path, req: LlmRequest, completion: str) -> Path:
    """Store the completion the mock provider returns for this request."""
    path = fixture_path(mock_dir, req)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(completion, encoding="utf-8")
    return path


def rules_completion(req: LlmRequest) -> Optional[str]:
    """Offline answer built from the job inputs; None for jobs without a rule."""
    inputs = req.inputs
    if req.kind == JobKind.CLAIM_EXTRACT:
        sentences = split_sentences(str(inputs.get("post_text", "")))
        claims = [s for s in sentences if not s.endswith("?") and token_count(s) >= 3]
        return json.dumps({"claims": claims}, ensure_ascii=False)
    if req.kind == JobKind.TOPIC_LABEL:
        text = fold_key(str(inputs.get("post_text", "")))
        labels = [c for c in inputs.get("candidates", []) if fold_key(c) and fold_key(c) in text]
        return json.dumps({"topics": labels}, ensure_ascii=False)
    if req.kind == JobKind.RELATION_GEN:
        claim = normalize_text(str(inputs.get("source_claim", ""))).rstrip(".!")
        relation = RelationLabel(inputs.get("relation"))
        prefix = "It is true that" if relation == RelationLabel.SUPPORT else "It is false that"
        return json.dumps({"target": f"{prefix} {claim}.", "relation": relation.value}, ensure_ascii=False)
    return None


class MockLlmProvider:
    """Deterministic provider over a fixture directory keyed by (kind, user text)."""

    name = "mock"

    def __init__(self, mock_dir: Optional[Path] = None, fallback: Optional[str] = None):
        self.mock_dir = Path(mock_dir) if mock_dir else None
        self.fallback = fallback
        self.calls = 0
        self._lock = threading.Lock()

    def chat(self, req: LlmRequest) -> str:
        with self._lock:
            self.calls += 1
        if self.mock_dir is not None:
            path = fixture_path(self.mock_dir, req)
            if path.exists():
                return path.read_text(encoding="utf-8")
        if self.fallback == "rules":
            completion = rules_completion(req)
            if completion is not None:
                return completion
        raise ProviderError(f"no mock fixture for {req.kind.value} ({fixture_key(req.kind, req.user)})")


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


class LlmClient:
    def __init__(
        self,
        provider: ChatProvider,
        retry: Optional[RetryPolicy] = None,
        limiter: Optional[SlidingWindowRateLimiter] = None,
        model: str = "mock",
        temperature: float = 0.0,
        max_tokens: int = 1024,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.retry = retry or RetryPolicy()
        self.limiter = limiter
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls = 0

    def _count_call(self) -> None:
        with self._lock:
            self.calls += 1

    def complete(self, req: LlmRequest) -> LlmResponse:
        """
        Send one request with retries; the raw completion is returned verbatim.

        The payload is parsed here; a parse failure leaves payload empty and
        records the reason. Exhausted retries and non-retryable provider
        errors raise StageError. AuthenticationError propagates unchanged.
        """
        logger.debug(f"LLM {req.kind.value} request: {truncate_for_log(req.user, 300)}")
        attempts = 0
        started = time.monotonic()
        raw = ""
        try:
            for attempt in self.retry.retrying(sleep=self._sleep):
                with attempt:
                    attempts += 1
                    if self.limiter is not None:
                        self.limiter.acquire()
                    self._count_call()
                    raw = self.provider.chat(req)
        except AuthenticationError:
            raise
        except TransportError as e:
            raise StageError("llm", f"{req.kind.value} failed after {attempts} attempts: {e}", raw=str(e)) from e
        except ProviderError as e:
            raise StageError("llm", f"{req.kind.value}: {e}", raw=str(e)) from e

        latency = time.monotonic() - started
        logger.debug(f"LLM {req.kind.value} response ({attempts} attempts): {truncate_for_log(raw, 300)}")
        try:
            payload = parse_structured(raw, req.kind).model_dump(mode="json")
            return LlmResponse(raw=raw, payload=payload, attempts=attempts, latency_seconds=latency)
        except ParseError as e:
            logger.debug(f"Unparseable {req.kind.value} completion ({e.stage}): {e}")
            return LlmResponse(raw=raw, attempts=attempts, latency_seconds=latency, parse_error=str(e))

    def run(self, kind: JobKind, inputs: Dict[str, Any]) -> LlmResponse:
        """Render the job's prompt with this client's decoding settings and complete it."""
        req = build_request(kind, inputs, self.model, temperature=self.temperature, max_tokens=self.max_tokens)
        return self.complete(req)


def complete(req: LlmRequest, provider: ChatProvider, retry: Optional[RetryPolicy] = None, **kwargs) -> LlmResponse:
    return LlmClient(provider, retry=retry, **kwargs).complete(req)


def make_llm_client(cfg: LlmConfig, client: Optional[httpx.Client] = None) -> LlmClient:
    log_separator(logger, f"LLM PROVIDER: {cfg.provider} / {cfg.model}", char="-")
    if cfg.provider == "http":
        if not cfg.endpoint:
            raise StageError("llm", "http provider needs llm.endpoint")
        provider: ChatProvider = HttpChatProvider(cfg.endpoint, api_key_env=cfg.api_key_env, client=client)
    else:
        provider = MockLlmProvider(Path(cfg.mock_dir) if cfg.mock_dir else None, fallback=cfg.mock_fallback)
    return LlmClient(
        provider,
        retry=RetryPolicy(cfg.max_attempts, cfg.base_delay, cfg.multiplier),
        limiter=SlidingWindowRateLimiter(cfg.requests_per_minute, 60.0) if cfg.provider == "http" else None,
        model=cfg.model,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        max_in_flight=cfg.max_in_flight,
    )
