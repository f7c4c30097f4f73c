"""
Stage Cache - content-addressed checkpoints of pipeline stage outputs.

Directory Structure:
    <work_dir>/cache/
        keywords/<key>.json
        queries/<key>.json
        fetch/<key>.json
        annotate/<key>.json
        cluster/<key>.json
        split/<key>.json
        emit/<key>.json

A stage key is the digest of the stage name, the key of the stage it reads
from, the stage's own config and the prompt template version. Timestamps play
no part, so a work dir copied to another machine still hits.
"""

import fcntl
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

from syndy.agents import templates
from syndy.common.logging_config import get_logger
from syndy.common.utils import digest_of

logger = get_logger(__name__)


class StageCache:
    CACHE_DIR = "cache"

    def __init__(self, work_dir: Path):
        self.root = Path(work_dir) / self.CACHE_DIR

    @staticmethod
    def key(stage: str, upstream: Optional[str], stage_config: Any) -> str:
        return digest_of(
            {
                "stage": stage,
                "upstream": upstream,
                "config": stage_config,
                "prompt_version": templates.PROMPT_VERSION,
                "template_digest": templates.template_digest(),
            }
        )

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / f"{key}.json"

    def load(self, stage: str, key: str) -> Optional[Dict[str, Any]]:
        """Stored output of a stage, or None when absent or unreadable."""
        path = self.path(stage, key)
        if not path.exists():
            return None
        try:
            entry = self._read_json_with_lock(path)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Ignoring unreadable checkpoint {path}: {e}")
            return None
        if entry.get("stage") != stage or entry.get("key") != key:
            logger.warning(f"Checkpoint {path} does not belong to {stage}/{key}; ignoring")
            return None
        logger.debug(f"Checkpoint hit for {stage} ({key[:12]})")
        return entry["output"]

    def store(self, stage: str, key: str, output: Dict[str, Any]) -> Path:
        path = self.path(stage, key)
        self._write_json_with_lock(path, {"stage": stage, "key": key, "output": output})
        logger.debug(f"Checkpoint stored for {stage} ({key[:12]})")
        return path

    def _read_json_with_lock(self, path: Path) -> Dict[str, Any]:
        with open(path, "r", encoding="utf-8") as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_SH)
            try:
                return json.load(f)
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)

    def _write_json_with_lock(self, path: Path, data: Dict[str, Any]) -> None:
        """Write to a sibling temp file under an exclusive lock, then rename into place."""
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                fcntl.flock(f.fileno(), fcntl.LOCK_EX)
                try:
                    json.dump(data, f, sort_keys=True, ensure_ascii=False)
                finally:
                    fcntl.flock(f.fileno(), fcntl.LOCK_UN)
            os.replace(tmp_name, path)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise
