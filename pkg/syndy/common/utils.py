import hashlib
import json
from pathlib import Path
from typing import Any


def get_project_root() -> Path:
    """
    Returns the root directory of the project (where .git is located).
    Walks up from the current working directory.
    If no .git found, defaults to CWD.
    """
    current = Path.cwd()
    while current != current.parent:
        if (current / ".git").exists():
            return current
        current = current.parent
    return Path.cwd()


def canonical_json(obj: Any) -> str:
    """Serialize to a stable JSON string (sorted keys, no insignificant whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    """Content digest of any JSON-serializable value."""
    return sha256_hex(canonical_json(obj))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
