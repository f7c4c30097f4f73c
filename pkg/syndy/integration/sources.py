"""
Social-media search sources.

Every source answers one page of one query at a time; pagination, rate
limiting, retries and dedup live in syndy.selection.fetcher. Sources are
responsible for their own query syntax: the canonical rendered query is
source-agnostic.
"""

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol

import httpx

from syndy.common.errors import AuthenticationError, ProviderError, StageError, TransportError
from syndy.common.logging_config import get_logger, truncate_for_log
from syndy.common.text import fold_key, normalize_text, scrub_surrogates
from syndy.common.types import Query, SourceConfig, SourceKind

logger = get_logger(__name__)


@dataclass
class RawPost:
    """A post as the source returned it, before normalization."""

    text: str
    native_id: Optional[str] = None
    url: Optional[str] = None
    created_at: Optional[str] = None
    fetched_at: Optional[datetime] = None

    def __post_init__(self):
        self.text = scrub_surrogates(self.text)
        for name in ("native_id", "url", "created_at"):
            value = getattr(self, name)
            if isinstance(value, str):
                setattr(self, name, scrub_surrogates(value))


@dataclass
class SourcePage:
    items: List[RawPost] = field(default_factory=list)
    next_token: Optional[str] = None


class SearchSource(Protocol):
    source_id: str

    def search_page(self, query: Query, page_token: Optional[str], page_size: int) -> SourcePage: ...


# ---------------------------------------------------------------------------
# Local corpus (offline)
# ---------------------------------------------------------------------------


def _parse_raw(row: Dict[str, Any], fetched_at: Optional[datetime]) -> Optional[RawPost]:
    text = row.get("text")
    if not isinstance(text, str):
        return None
    native_id = row.get("id")
    return RawPost(
        text=text,
        native_id=str(native_id) if native_id is not None else None,
        url=row.get("url"),
        created_at=row.get("created_at"),
        fetched_at=fetched_at,
    )


def load_corpus(corpus_dir: Path) -> List[RawPost]:
    """All raw posts of a corpus directory, files in name order, lines in file order."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise StageError("fetch", f"corpus directory not found: {corpus_dir}")

    posts: List[RawPost] = []
    for path in sorted(corpus_dir.glob("*.jsonl")):
        try:
            # snapshot time of an offline corpus is the file's modification time
            snapshot = datetime.fromtimestamp(int(path.stat().st_mtime), tz=timezone.utc)
            with open(path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    raw = _parse_raw(json.loads(line), snapshot)
                    if raw is None:
                        logger.warning(f"{path}:{lineno}: record without text skipped")
                        continue
                    posts.append(raw)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise StageError("fetch", f"unreadable corpus file {path}: {e}") from e
    logger.debug(f"Loaded {len(posts)} raw posts from {corpus_dir}")
    return posts


def matches_all_terms(text: str, terms: List[str]) -> bool:
    """AND semantics: every term occurs as a case-insensitive substring."""
    haystack = fold_key(text)
    return all(fold_key(term) in haystack for term in terms)


def local_corpus_search(query: Query, corpus_dir: Path) -> List[RawPost]:
    return [p for p in load_corpus(corpus_dir) if matches_all_terms(p.text, list(query.terms))]


class LocalCorpusSource:
    """Offline source over a directory of *.jsonl files ({id?, text, url?, created_at?})."""

    def __init__(self, corpus_dir: Path, source_id: str = "local"):
        self.corpus_dir = Path(corpus_dir)
        self.source_id = source_id
        self._corpus: Optional[List[RawPost]] = None

    def search_page(self, query: Query, page_token: Optional[str], page_size: int) -> SourcePage:
        if self._corpus is None:
            self._corpus = load_corpus(self.corpus_dir)
        matched = [p for p in self._corpus if matches_all_terms(p.text, list(query.terms))]
        offset = int(page_token or 0)
        end = offset + page_size
        return SourcePage(items=matched[offset:end], next_token=str(end) if end < len(matched) else None)


# ---------------------------------------------------------------------------
# HTTP sources
# ---------------------------------------------------------------------------


def raise_for_provider_status(response: httpx.Response, what: str) -> None:
    """Map HTTP status codes onto the provider error taxonomy."""
    status = response.status_code
    if status < 400:
        return
    if status in (401, 403):
        raise AuthenticationError(f"{what}: authentication failed (HTTP {status})")
    if status == 429 or status >= 500:
        retry_after = response.headers.get("Retry-After")
        try:
            delay = float(retry_after) if retry_after else None
        except ValueError:
            delay = None
        raise TransportError(f"{what}: HTTP {status}", retry_after=delay)
    raise ProviderError(f"{what}: HTTP {status}: {truncate_for_log(response.text, 300)}")


def quote_term(term: str) -> str:
    term = normalize_text(term)
    return f'"{term}"' if " " in term else term


class HttpSearchSource:
    """
    Generic JSON search endpoint.

    Request: GET <endpoint>?q=<query>&limit=<n>[&page_token=<token>]
    Response: {"items": [{"id", "text", "url", "created_at"}...], "next": <token|null>}
    """

    def __init__(
        self,
        endpoint: str,
        source_id: str = "http",
        api_key_env: str = "SYNDY_SOURCE_API_KEY",
        client: Optional[httpx.Client] = None,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.source_id = source_id
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)

    def render_query(self, query: Query) -> str:
        return " AND ".join(quote_term(t) for t in query.terms)

    def _headers(self) -> Dict[str, str]:
        headers = {"Accept": "application/json", "User-Agent": "syndy/0.1"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _params(self, query: Query, page_token: Optional[str], page_size: int) -> Dict[str, Any]:
        params: Dict[str, Any] = {"q": self.render_query(query), "limit": page_size}
        if page_token:
            params["page_token"] = page_token
        return params

    def _get(self, params: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = self._client.get(self.endpoint, params=params, headers=self._headers())
        except httpx.TransportError as e:
            raise TransportError(f"{self.source_id}: {e}") from e
        raise_for_provider_status(response, self.source_id)
        try:
            return response.json()
        except ValueError as e:
            raise ProviderError(f"{self.source_id}: response is not JSON") from e

    def _parse_page(self, body: Dict[str, Any]) -> SourcePage:
        now = datetime.now(timezone.utc)
        items = [raw for raw in (_parse_raw(row, now) for row in body.get("items", [])) if raw]
        return SourcePage(items=items, next_token=body.get("next"))

    def search_page(self, query: Query, page_token: Optional[str], page_size: int) -> SourcePage:
        body = self._get(self._params(query, page_token, page_size))
        return self._parse_page(body)


class RedditSearchSource(HttpSearchSource):
    """Reddit search listing: data.children[].data, paginated by data.after."""

    DEFAULT_ENDPOINT = "https://oauth.reddit.com/search"

    def _params(self, query: Query, page_token: Optional[str], page_size: int) -> Dict[str, Any]:
        params: Dict[str, Any] = {
            "q": self.render_query(query),
            "limit": page_size,
            "sort": "new",
            "type": "link",
            "raw_json": 1,
        }
        if page_token:
            params["after"] = page_token
        return params

    def _parse_page(self, body: Dict[str, Any]) -> SourcePage:
        now = datetime.now(timezone.utc)
        listing = body.get("data", {})
        items = []
        for child in listing.get("children", []):
            data = child.get("data", {})
            text = "\n".join(part for part in (data.get("title"), data.get("selftext")) if part)
            permalink = data.get("permalink")
            created = data.get("created_utc")
            items.append(
                RawPost(
                    text=text,
                    native_id=data.get("id"),
                    url=f"https://www.reddit.com{permalink}" if permalink else data.get("url"),
                    created_at=(
                        datetime.fromtimestamp(float(created), tz=timezone.utc).isoformat() if created else None
                    ),
                    fetched_at=now,
                )
            )
        return SourcePage(items=items, next_token=listing.get("after"))


def make_source(cfg: SourceConfig, client: Optional[httpx.Client] = None) -> SearchSource:
    if cfg.kind == SourceKind.LOCAL:
        if not cfg.endpoint:
            raise StageError("fetch", "local source needs source.endpoint (corpus directory)")
        return LocalCorpusSource(Path(cfg.endpoint), source_id=cfg.source_id)
    if cfg.kind == SourceKind.HTTP:
        if not cfg.endpoint:
            raise StageError("fetch", "http source needs source.endpoint")
        return HttpSearchSource(cfg.endpoint, source_id=cfg.source_id, api_key_env=cfg.api_key_env, client=client)
    if cfg.kind == SourceKind.REDDIT:
        return RedditSearchSource(
            cfg.endpoint or RedditSearchSource.DEFAULT_ENDPOINT,
            source_id=cfg.source_id,
            api_key_env=cfg.api_key_env,
            client=client,
        )
    raise StageError("fetch", f"source kind {cfg.kind.value} does not search")
