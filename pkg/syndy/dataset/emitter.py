"""
Dataset emission and verification.

Layout:
    <out_dir>/manifest.json
    <out_dir>/{train,dev,test}/{posts,claims,topics,relations,clusters}.jsonl

The tree is written to a sibling temp directory and renamed into place, so a
failed emission never leaves a partial dataset behind.
"""

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

from syndy.agents import templates
from syndy.common.errors import StageError, ValidationError
from syndy.common.logging_config import get_logger, log_separator
from syndy.common.records import RECORD_FILES, read_jsonl, read_jsonl_dicts, sort_key, validate_raw, write_jsonl
from syndy.common.types import DatasetManifest, ProviderInfo, SplitBundle, SplitName, SplitStats, Topic
from syndy.common.utils import file_digest
from syndy.dataset.splitter import SPLIT_ORDER

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"


def manifest_text(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write_tree(root: Path, bundles: Mapping[SplitName, SplitBundle]) -> Dict[str, Dict[str, int]]:
    counts: Dict[str, Dict[str, int]] = {}
    for name in SPLIT_ORDER:
        bundle = bundles.get(name) or SplitBundle(name=name)
        counts[name.value] = {}
        for stem in RECORD_FILES:
            records = sorted(getattr(bundle, stem), key=sort_key)
            counts[name.value][stem] = write_jsonl(root / name.value / f"{stem}.jsonl", records)
    return counts


def _swap_into_place(staging: Path, out_dir: Path) -> None:
    """Rename staging to out_dir; a previous tree is put back if the second rename fails."""
    if not out_dir.exists():
        os.replace(staging, out_dir)
        return
    retired = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.old.", dir=out_dir.parent))
    try:
        os.replace(out_dir, retired / out_dir.name)
        try:
            os.replace(staging, out_dir)
        except OSError:
            os.replace(retired / out_dir.name, out_dir)
            raise
    finally:
        shutil.rmtree(retired, ignore_errors=True)


def emit(
    bundles: Mapping[SplitName, SplitBundle],
    out_dir: Path,
    *,
    seed: int,
    topics: Iterable[Topic],
    tau: float,
    proportions: Mapping[str, float],
    providers: Optional[Mapping[str, ProviderInfo]] = None,
    split_stats: Optional[SplitStats] = None,
) -> DatasetManifest:
    """Write every split and the manifest; returns the manifest written."""
    out_dir = Path(out_dir)
    log_separator(logger, f"EMIT: {out_dir}")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))

    try:
        counts = _write_tree(staging, bundles)
        digests = {
            f"{split}/{stem}.jsonl": file_digest(staging / split / f"{stem}.jsonl")
            for split in counts
            for stem in RECORD_FILES
        }
        manifest = DatasetManifest(
            seed=seed,
            providers=dict(providers or {}),
            prompt_version=templates.PROMPT_VERSION,
            template_digest=templates.template_digest(),
            topics=sorted(topics, key=lambda t: t.topic_id),
            tau=tau,
            proportions={SplitName(k).value: float(v) for k, v in proportions.items()},
            counts=counts,
            digests=digests,
            split_stats=split_stats or SplitStats(),
        )
        (staging / MANIFEST_FILE).write_text(manifest_text(manifest), encoding="utf-8")

        _swap_into_place(staging, out_dir)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise StageError("emit", f"cannot write dataset to {out_dir}: {e}") from e
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    total = sum(sum(c.values()) for c in counts.values())
    logger.info(f"Emitted {total} records to {out_dir}")
    return manifest


def load_manifest(out_dir: Path) -> DatasetManifest:
    path = Path(out_dir) / MANIFEST_FILE
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise StageError("validate", f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise ValidationError(f"{path} is not a valid manifest", [f"manifest: {e}"]) from e


def verify_manifest(out_dir: Path, manifest: Optional[DatasetManifest] = None) -> List[str]:
    """Digest and count mismatches between the manifest and the files on disk."""
    out_dir = Path(out_dir)
    manifest = manifest or load_manifest(out_dir)
    violations = []
    for rel_path, digest in sorted(manifest.digests.items()):
        path = out_dir / rel_path
        if not path.exists():
            violations.append(f"missing file {rel_path}")
            continue
        if file_digest(path) != digest:
            violations.append(f"digest mismatch for {rel_path}")
    for split, per_file in sorted(manifest.counts.items()):
        for stem, expected in sorted(per_file.items()):
            path = out_dir / split / f"{stem}.jsonl"
            if path.exists():
                actual = len(read_jsonl_dicts(path))
                if actual != expected:
                    violations.append(f"{split}/{stem}.jsonl has {actual} records, manifest says {expected}")
    return violations


def load_dataset(out_dir: Path) -> Dict[SplitName, SplitBundle]:
    out_dir = Path(out_dir)
    bundles = {}
    for name in SPLIT_ORDER:
        fields = {}
        for stem, model in RECORD_FILES.items():
            path = out_dir / name.value / f"{stem}.jsonl"
            fields[stem] = read_jsonl(path, model) if path.exists() else []
        bundles[name] = SplitBundle(name=name, **fields)
    return bundles


def validate_dataset(out_dir: Path) -> List[str]:
    """
    Every problem with an emitted dataset: manifest consistency, record
    invariants, dangling references within a split and cross-split leakage.
    """
    out_dir = Path(out_dir)
    violations = verify_manifest(out_dir)
    seen: Dict[str, Dict[str, str]] = {"post_id": {}, "claim_id": {}, "cluster_id": {}}

    for name in SPLIT_ORDER:
        split_dir = out_dir / name.value
        rows = {
            stem: read_jsonl_dicts(split_dir / f"{stem}.jsonl") if (split_dir / f"{stem}.jsonl").exists() else []
            for stem in RECORD_FILES
        }
        post_ids = {str(r.get("post_id")) for r in rows["posts"]}
        claim_ids = {str(r.get("claim_id")) for r in rows["claims"]}
        tables = {
            "posts": {},
            "claims": {"post_ids": post_ids},
            "topics": {"post_ids": post_ids},
            "relations": {"claim_ids": claim_ids},
            "clusters": {"claim_ids": claim_ids},
        }
        for stem, model in RECORD_FILES.items():
            for lineno, row in enumerate(rows[stem], 1):
                for violation in validate_raw(model, row, **tables[stem]):
                    violations.append(f"{name.value}/{stem}.jsonl:{lineno}: {violation}")

        for key, values in (
            ("post_id", post_ids),
            ("claim_id", claim_ids),
            ("cluster_id", {str(r.get("cluster_id")) for r in rows["clusters"]}),
        ):
            for value in sorted(values):
                other = seen[key].setdefault(value, name.value)
                if other != name.value:
                    violations.append(f"{key} {value} appears in both {other} and {name.value}")

    if violations:
        logger.warning(f"Dataset {out_dir} has {len(violations)} violations")
    return violations
