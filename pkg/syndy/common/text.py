"""Text normalization shared by hashing, dedup and prompt rendering."""

import re
import unicodedata

from syndy.common.utils import sha256_hex

_WHITESPACE = re.compile(r"\s+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def scrub_surrogates(text: str) -> str:
    """Replace lone surrogates (valid in JSON escapes, unencodable as UTF-8) with '?'."""
    return text.encode("utf-8", "replace").decode("utf-8")


def normalize_text(text: str) -> str:
    """NFC, lone surrogates scrubbed, internal whitespace runs collapsed to one space, trimmed."""
    if text is None:
        return ""
    text = scrub_surrogates(text)
    return _WHITESPACE.sub(" ", unicodedata.normalize("NFC", text)).strip()


def fold_key(text: str) -> str:
    """Comparison key: normalized and case-folded."""
    return normalize_text(text).casefold()


def content_hash(text: str) -> str:
    return sha256_hex(normalize_text(text))


def token_count(text: str) -> int:
    return len(normalize_text(text).split(" ")) if normalize_text(text) else 0


def split_sentences(text: str) -> list[str]:
    return [s for s in (normalize_text(p) for p in _SENTENCE_END.split(normalize_text(text))) if s]


def truncate_at_sentence(text: str, max_chars: int) -> tuple[str, bool]:
    """
    Cut text to at most max_chars, preferring the last sentence boundary.

    Returns the (possibly shortened) text and whether it was truncated.
    Falls back to a word boundary, then a hard cut, when no sentence fits.
    """
    text = normalize_text(text)
    if len(text) <= max_chars:
        return text, False

    kept = ""
    for sentence in split_sentences(text):
        candidate = f"{kept} {sentence}".strip()
        if len(candidate) > max_chars:
            break
        kept = candidate
    if kept:
        return kept, True

    head = text[:max_chars]
    if " " in head:
        head = head.rsplit(" ", 1)[0]
    return head.strip(), True
