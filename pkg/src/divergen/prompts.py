"""Prompt construction: manual templates, LLM instructions, budget allocation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .dataset import CategoryRecord

logger = logging.getLogger(__name__)

DEFAULT_PATTERN = "a photo of a single {category_name}, {category_def}"
DEFAULT_BACKGROUND_CLAUSE = "in a white background"

# The three constraints handed to the prompt-writing language model.
LLM_REQUIREMENTS = (
    "each prompt should be as different as possible",
    "each prompt should ensure that there is only one object in the image",
    "prompts should describe different attributes of the category",
)

_ENUM_MARKER = re.compile(r"^\s*(?:\d+\s*[.):]\s*|[-*•]\s*)")


class PromptError(ValueError):
    """Raised on unusable prompt material."""


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = DEFAULT_PATTERN
    background_clause: str = DEFAULT_BACKGROUND_CLAUSE

    def __post_init__(self) -> None:
        if self.pattern.count("{category_name}") != 1:
            raise PromptError("pattern must contain {category_name} exactly once")


@dataclass(frozen=True)
class PromptPool:
    category_id: int
    prompts: tuple[str, ...]
    images_per_prompt: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompts", tuple(self.prompts))
        object.__setattr__(self, "images_per_prompt", tuple(int(n) for n in self.images_per_prompt))
        if len(self.prompts) != len(self.images_per_prompt):
            raise PromptError(
                f"category {self.category_id}: {len(self.prompts)} prompts vs "
                f"{len(self.images_per_prompt)} budgets"
            )
        if any(n < 0 for n in self.images_per_prompt):
            raise PromptError(f"category {self.category_id}: negative image budget")
        if self.images_per_prompt and max(self.images_per_prompt) - min(self.images_per_prompt) > 1:
            raise PromptError(f"category {self.category_id}: uneven budget split")

    @property
    def budget(self) -> int:
        return sum(self.images_per_prompt)

    def to_json(self) -> dict:
        return {
            "category_id": self.category_id,
            "prompts": list(self.prompts),
            "images_per_prompt": list(self.images_per_prompt),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptPool":
        try:
            return cls(
                category_id=int(obj["category_id"]),
                prompts=tuple(str(p) for p in obj["prompts"]),
                images_per_prompt=tuple(obj["images_per_prompt"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PromptError(f"malformed prompt pool: {exc}") from exc


@dataclass(frozen=True)
class LlmInstruction:
    category_name: str
    requested_count: int
    constraints: tuple[str, ...] = LLM_REQUIREMENTS

    def text(self) -> str:
        lines = [
            f"Write {self.requested_count} prompts for generating images of "
            f'"{self.category_name}" with a text-to-image model.'
        ]
        for i, constraint in enumerate(self.constraints, start=1):
            lines.append(f"{i}) {constraint};")
        lines.append("Return one prompt per line.")
        return "\n".join(lines)


def render_manual_prompt(category: CategoryRecord, template: PromptTemplate | None = None) -> str:
    """Fill the manual template; drop the definition clause when absent."""
    template = template or PromptTemplate()
    if not category.name:
        raise PromptError(f"category {category.id} has an empty name")
    pattern = template.pattern
    if category.definition is None:
        pattern = pattern.replace(", {category_def}", "").replace("{category_def}", "")
        body = pattern.format(category_name=category.name)
    else:
        body = pattern.format(category_name=category.name, category_def=category.definition)
    return f"{body}, {template.background_clause}"


def build_llm_instruction(category: CategoryRecord, count: int) -> LlmInstruction:
    if count < 1:
        raise PromptError(f"requested prompt count must be >= 1, got {count}")
    return LlmInstruction(category_name=category.name, requested_count=count)


def _normalize_line(line: str) -> str:
    line = _ENUM_MARKER.sub("", line.strip())
    line = line.strip()
    if len(line) >= 2 and line[0] == line[-1] and line[0] in "\"'":
        line = line[1:-1].strip()
    return re.sub(r"\s+", " ", line)


def parse_llm_prompts(response: str, expected: int, background_clause: str = DEFAULT_BACKGROUND_CLAUSE) -> list[str]:
    """Extract prompts from an LLM response, one per line.

    Strips enumeration markers and surrounding quotes, appends the background
    clause to lines missing it, drops exact duplicates, and truncates to
    ``expected``. Parsing the returned list again is a no-op.
    """
    prompts: list[str] = []
    seen: set[str] = set()
    for raw in response.splitlines():
        line = _normalize_line(raw)
        if not line:
            continue
        if not line.endswith(background_clause):
            line = f"{line.rstrip(',')}, {background_clause}"
        if line in seen:
            continue
        seen.add(line)
        prompts.append(line)
    if not prompts:
        raise PromptError("no parseable prompts in response")
    if len(prompts) < expected:
        logger.warning("parsed %d prompts, expected %d", len(prompts), expected)
    return prompts[:expected]


def allocate_generation_budget(prompt_count: int, category_budget: int) -> list[int]:
    """Split a category budget as evenly as possible across its prompts."""
    if prompt_count < 1:
        raise PromptError(f"prompt_count must be >= 1, got {prompt_count}")
    if category_budget < 0:
        raise PromptError(f"category_budget must be >= 0, got {category_budget}")
    base, extra = divmod(category_budget, prompt_count)
    return [base + 1 if i < extra else base for i in range(prompt_count)]


def build_prompt_pool(
    category: CategoryRecord,
    budget: int,
    llm_response: str | None = None,
    expected_llm_prompts: int = 0,
    template: PromptTemplate | None = None,
) -> PromptPool:
    """Manual prompt plus optional LLM prompts, with a fair budget split."""
    template = template or PromptTemplate()
    prompts = [render_manual_prompt(category, template)]
    if llm_response is not None:
        extra = parse_llm_prompts(llm_response, expected_llm_prompts, template.background_clause)
        prompts.extend(p for p in extra if p not in prompts)
    return PromptPool(
        category_id=category.id,
        prompts=tuple(prompts),
        images_per_prompt=tuple(allocate_generation_budget(len(prompts), budget)),
    )


def save_prompt_pools(pools: list[PromptPool], path: str | Path) -> None:
    doc = [pool.to_json() for pool in sorted(pools, key=lambda p: p.category_id)]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_prompt_pools(path: str | Path) -> list[PromptPool]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise PromptError(f"{path}: expected a JSON array of pools")
    return [PromptPool.from_json(obj) for obj in doc]
