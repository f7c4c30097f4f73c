import json
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Any, Dict, List, Tuple

from pydantic import BaseModel

from syndy.common.errors import ValidationError
from syndy.common.text import normalize_text
from syndy.common.types import JobKind, LlmRequest, RelationLabel
from syndy.common.utils import sha256_hex

# Bump whenever a prompt file changes; recorded in every manifest.
PROMPT_VERSION = "1"


class JobTemplate(BaseModel):
    kind: JobKind
    file_stem: str
    required_inputs: List[str]


# Job template map
#
# Each job renders <stem>.system.txt and <stem>.user.txt (string.Template
# placeholders) from the inputs named here.
JOB_TEMPLATES: Dict[JobKind, JobTemplate] = {
    JobKind.KEYWORDS: JobTemplate(
        kind=JobKind.KEYWORDS,
        file_stem="keywords",
        required_inputs=["topic", "heavy_n", "lesser_n"],
    ),
    JobKind.CLAIM_EXTRACT: JobTemplate(
        kind=JobKind.CLAIM_EXTRACT,
        file_stem="claim_extract",
        required_inputs=["post_text"],
    ),
    JobKind.TOPIC_LABEL: JobTemplate(
        kind=JobKind.TOPIC_LABEL,
        file_stem="topic_label",
        required_inputs=["post_text", "candidates"],
    ),
    JobKind.RELATION_GEN: JobTemplate(
        kind=JobKind.RELATION_GEN,
        file_stem="relation_gen",
        required_inputs=["source_claim", "relation"],
    ),
}


@lru_cache(maxsize=None)
def load_template_file(name: str) -> str:
    return resources.files("syndy.agents").joinpath("prompts", name).read_text(encoding="utf-8")


def template_digest() -> str:
    """Digest over every shipped prompt file, in a fixed order."""
    parts = []
    for template in JOB_TEMPLATES.values():
        for role in ("system", "user"):
            name = f"{template.file_stem}.{role}.txt"
            parts.append(f"{name}\n{load_template_file(name)}")
    return sha256_hex("\x1e".join(parts))


def _label_instruction(candidates: List[str], allow_free_form: bool) -> str:
    if not candidates:
        return "Use short, lowercase narrative topic names of your own choosing."
    listing = json.dumps(candidates, ensure_ascii=False)
    if allow_free_form:
        return (
            f"Prefer labels from this list: {listing}. "
            "If none fits, you may add a short, lowercase topic name of your own."
        )
    return f"Use only labels from this list, copied exactly: {listing}. Return an empty list if none fits."


def _exclude_instruction(terms: List[str]) -> str:
    if not terms:
        return ""
    return f"These keywords are already collected; propose different ones: {json.dumps(sorted(terms), ensure_ascii=False)}"


def _substitutions(kind: JobKind, inputs: Dict[str, Any]) -> Dict[str, str]:
    if kind == JobKind.KEYWORDS:
        description = inputs.get("description")
        return {
            "topic": normalize_text(str(inputs["topic"])),
            "description": f"Context: {normalize_text(description)}" if description else "",
            "heavy_n": str(int(inputs["heavy_n"])),
            "lesser_n": str(int(inputs["lesser_n"])),
            "exclude": _exclude_instruction(inputs.get("exclude") or []),
        }
    if kind == JobKind.CLAIM_EXTRACT:
        return {"post_text": normalize_text(str(inputs["post_text"]))}
    if kind == JobKind.TOPIC_LABEL:
        candidates = [normalize_text(c) for c in inputs["candidates"]]
        return {
            "post_text": normalize_text(str(inputs["post_text"])),
            "label_instruction": _label_instruction(candidates, bool(inputs.get("allow_free_form", False))),
        }
    relation = RelationLabel(inputs["relation"])
    return {
        "source_claim": normalize_text(str(inputs["source_claim"])),
        "relation": relation.value,
        "relation_verb": relation.value.lower(),
    }


def render_prompt(kind: JobKind, inputs: Dict[str, Any]) -> Tuple[str, str]:
    """Deterministic (system text, user text) for a job."""
    template = JOB_TEMPLATES[kind]
    missing = [name for name in template.required_inputs if inputs.get(name) is None]
    if missing:
        raise ValidationError(f"{kind.value} prompt is missing inputs: {missing}", [f"missing {m}" for m in missing])

    values = _substitutions(kind, inputs)
    system = Template(load_template_file(f"{template.file_stem}.system.txt")).substitute(values)
    user = Template(load_template_file(f"{template.file_stem}.user.txt")).substitute(values)
    return system.strip(), user.strip()


def build_request(
    kind: JobKind,
    inputs: Dict[str, Any],
    model: str,
    temperature: float = 0.0,
    max_tokens: int = 1024,
) -> LlmRequest:
    system, user = render_prompt(kind, inputs)
    return LlmRequest(
        kind=kind,
        system=system,
        user=user,
        temperature=temperature,
        max_tokens=max_tokens,
        model=model,
        inputs=inputs,
    )
