"""
Embedding providers and the content-addressed embedding cache.

Vectors leave this module L2-normalized, one per input text, in input order.
"""

import json
import os
import re
import threading
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence

import httpx
import numpy as np

from syndy.common.errors import AuthenticationError, ProviderError, StageError, TransportError, ValidationError
from syndy.common.logging_config import get_logger
from syndy.common.text import fold_key, normalize_text
from syndy.common.types import EmbeddingConfig, EmbeddingVector
from syndy.common.utils import digest_of, sha256_hex
from syndy.integration.rate_limiter import RetryPolicy
from syndy.integration.sources import raise_for_provider_status

logger = get_logger(__name__)

_TOKEN = re.compile(r"\w+")


class EmbeddingProvider(Protocol):
    name: str
    model: str

    def embed(self, texts: Sequence[str]) -> List[List[float]]: ...


class HashEmbedder:
    """
    Offline embedder: every token maps to a fixed Gaussian vector seeded by its
    hash, a text is the normalized sum of its token vectors. Texts sharing most
    words land close together; identical texts get identical vectors.
    """

    name = "hash"

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.model = f"hash-{dim}"
        self._token_vectors: Dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_vectors.get(token)
        if vec is None:
            seed = int(sha256_hex(token)[:16], 16)
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            self._token_vectors[token] = vec
        return vec

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        vectors = []
        for text in texts:
            tokens = _TOKEN.findall(fold_key(text)) or [fold_key(text)]
            total = np.sum([self._token_vector(t) for t in tokens], axis=0)
            vectors.append(total.tolist())
        return vectors


class HttpEmbeddingProvider:
    """POST <endpoint> {model, input: [texts]} -> {vectors: [[...]]}."""

    name = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "SYNDY_EMBEDDING_API_KEY",
        client: Optional[httpx.Client] = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._client.post(self.endpoint, json={"model": self.model, "input": list(texts)}, headers=headers)
        except httpx.TransportError as e:
            raise TransportError(f"embedding: {e}") from e
        raise_for_provider_status(response, "embedding")
        try:
            body = response.json()
        except ValueError as e:
            raise ProviderError("embedding: response is not JSON") from e
        if "vectors" in body:
            return body["vectors"]
        if "data" in body:
            return [row["embedding"] for row in body["data"]]
        raise ProviderError("embedding: response has neither 'vectors' nor 'data'")


class EmbeddingCache:
    """Vectors keyed by digest of (model, normalized text); in memory, optionally mirrored to a directory."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: Dict[str, List[float]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(model: str, text: str) -> str:
        return digest_of({"model": model, "text": normalize_text(text)})

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[List[float]]:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.cache_dir is not None and self._path(key).exists():
            vector = json.loads(self._path(key).read_text(encoding="utf-8"))
            with self._lock:
                self._memory[key] = vector
            return vector
        return None

    def put(self, key: str, vector: List[float]) -> None:
        with self._lock:
            self._memory[key] = vector
        if self.cache_dir is not None:
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(vector), encoding="utf-8")


def unit_normalize(values: Sequence[float]) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0.0:
        raise StageError("embed", "provider returned a zero or non-finite vector")
    return vec / norm


class Embedder:
    def __init__(
        self,
        provider: EmbeddingProvider,
        cache: Optional[EmbeddingCache] = None,
        retry: Optional[RetryPolicy] = None,
        batch_size: int = 64,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache = cache or EmbeddingCache()
        self.retry = retry or RetryPolicy()
        self.batch_size = batch_size
        self._sleep = sleep
        self.calls = 0

    def _embed_batch(self, texts: List[str]) -> List[List[float]]:
        try:
            for attempt in self.retry.retrying(sleep=self._sleep):
                with attempt:
                    self.calls += 1
                    vectors = self.provider.embed(texts)
        except AuthenticationError as e:
            raise StageError("embed", str(e)) from e
        except ProviderError as e:
            raise StageError("embed", f"embedding provider failed: {e}", raw=str(e)) from e
        if len(vectors) != len(texts):
            raise StageError("embed", f"provider returned {len(vectors)} vectors for {len(texts)} texts")
        return vectors

    def embed_all(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        if not texts:
            raise ValidationError("embed_all needs at least one text")
        empty = [i for i, t in enumerate(texts) if not normalize_text(t)]
        if empty:
            raise ValidationError(f"empty texts at positions {empty}", [f"empty text at {i}" for i in empty])

        keys = [EmbeddingCache.key(self.provider.model, t) for t in texts]
        found: Dict[str, List[float]] = {}
        missing: List[str] = []
        missing_texts: List[str] = []
        queued = set()
        for key, text in zip(keys, texts):
            if key in found or key in queued:
                continue
            cached = self.cache.get(key)
            if cached is not None:
                found[key] = cached
            else:
                queued.add(key)
                missing.append(key)
                missing_texts.append(normalize_text(text))

        for start in range(0, len(missing), self.batch_size):
            batch_keys = missing[start : start + self.batch_size]
            batch = self._embed_batch(missing_texts[start : start + self.batch_size])
            for key, values in zip(batch_keys, batch):
                vector = unit_normalize(values).tolist()
                self.cache.put(key, vector)
                found[key] = vector
        logger.debug(f"Embedded {len(texts)} texts: {len(missing)} computed, {len(texts) - len(missing)} cached")

        dims = {len(found[k]) for k in keys}
        if len(dims) != 1:
            raise StageError("embed", f"inconsistent vector dimensions {sorted(dims)}")
        return [EmbeddingVector(dim=len(found[k]), values=tuple(found[k])) for k in keys]


def make_embedder(cfg: EmbeddingConfig, cache_dir: Optional[Path] = None, client: Optional[httpx.Client] = None) -> Embedder:
    if cfg.provider == "http":
        if not cfg.endpoint:
            raise StageError("embed", "http embedding provider needs embedding.endpoint")
        provider: EmbeddingProvider = HttpEmbeddingProvider(cfg.endpoint, cfg.model, cfg.api_key_env, client=client)
    else:
        provider = HashEmbedder(cfg.dim)
    return Embedder(
        provider,
        cache=EmbeddingCache(cache_dir),
        retry=RetryPolicy(cfg.max_attempts, cfg.base_delay, cfg.multiplier),
        batch_size=cfg.batch_size,
    )
