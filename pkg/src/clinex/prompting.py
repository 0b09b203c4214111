"""Deterministic prompt rendering for the three extraction setups.

naive:    task instruction + bare category list + report text.
advanced: task instruction + full category definitions + retrieved
          (report, gold) pairs as in-context examples + report text.
minimal:  one short instruction + report text, for fine-tuned models;
          the same template feeds the fine-tuning data builder so
          training and inference instructions match exactly.

Rendering is a pure function of its inputs: identical inputs yield
byte-identical prompts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from clinex.schema import (
    CATEGORY_NAMES,
    CATEGORY_ORDER,
    Category,
    ClinicalReport,
    StructuredReport,
    serialize_report,
)


class PromptError(Exception):
    pass


class MissingDefinition(PromptError):
    def __init__(self, category: Category):
        super().__init__(f"no definition for category {category.value!r}")
        self.category = category


class EmptyExamples(PromptError):
    pass


MODES = ("naive", "advanced", "minimal")

SYSTEM_TEXT = "You are a clinical information extraction system."

OUTPUT_RULES = (
    "Answer with a single JSON object and nothing else.\n"
    "Use only the category names listed above as keys, and include a key only when\n"
    "the report contains information for it. Every value must be a string; when a\n"
    "category holds several concepts, separate them with semicolons (;)."
)

MINIMAL_INSTRUCTION = (
    "Extract the structured clinical information from the report below as a JSON "
    "object with semicolon-separated values."
)


@dataclass(frozen=True)
class CategoryDefinition:
    """Authored definition and scope notes for one category."""

    category: Category
    definition: str
    scope_notes: str = ""

    def __post_init__(self) -> None:
        if not self.definition.strip():
            raise PromptError(f"empty definition for {self.category.value!r}")


@dataclass(frozen=True)
class DefinitionSet:
    """A complete, versioned set of definitions: exactly one per category."""

    version: str
    definitions: tuple[CategoryDefinition, ...]

    def __post_init__(self) -> None:
        covered = [d.category for d in self.definitions]
        if len(set(covered)) != len(covered):
            raise PromptError("duplicate category definition")
        for category in CATEGORY_ORDER:
            if category not in covered:
                raise MissingDefinition(category)

    def get(self, category: Category) -> CategoryDefinition:
        for definition in self.definitions:
            if definition.category is category:
                return definition
        raise MissingDefinition(category)

    @property
    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "version": self.version,
                "categories": {
                    d.category.value: [d.definition, d.scope_notes] for d in self.definitions
                },
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_definitions(source: str | Path = "en-v1") -> DefinitionSet:
    """Load a definition set by bundled version name or from a JSON file."""
    if isinstance(source, str) and not source.endswith(".json"):
        package_file = resources.files("clinex.definitions") / f"{source.replace('-', '_')}.json"
        data = json.loads(package_file.read_text(encoding="utf-8"))
    else:
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    definitions = tuple(
        CategoryDefinition(
            category=Category(name),
            definition=entry["definition"],
            scope_notes=entry.get("scope_notes", ""),
        )
        for name, entry in data["categories"].items()
    )
    return DefinitionSet(version=data["version"], definitions=definitions)


@dataclass(frozen=True)
class PromptSpec:
    """A rendered prompt: mode, the two chat messages, and example count."""

    mode: str
    system_text: str
    user_text: str
    example_count: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PromptError(f"unknown mode {self.mode!r}")
        if self.mode in ("naive", "minimal") and self.example_count != 0:
            raise PromptError(f"{self.mode} prompts must not carry examples")
        if self.mode == "advanced" and self.example_count < 1:
            raise PromptError("advanced prompts require at least one example")

    @property
    def content_hash(self) -> str:
        payload = json.dumps(
            {"mode": self.mode, "system": self.system_text, "user": self.user_text},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _category_list() -> str:
    return "\n".join(f"- {name}" for name in CATEGORY_NAMES)


def build_naive_prompt(report: ClinicalReport) -> PromptSpec:
    """Name the task and the categories; no definitions, no examples."""
    user_text = (
        "Extract structured information from the clinical report below.\n"
        "The categories are:\n"
        f"{_category_list()}\n\n"
        f"{OUTPUT_RULES}\n\n"
        "Clinical report:\n"
        f"{report.text}"
    )
    return PromptSpec(mode="naive", system_text=SYSTEM_TEXT, user_text=user_text)


def _render_definitions(definitions: DefinitionSet) -> str:
    blocks = []
    for category in CATEGORY_ORDER:
        entry = definitions.get(category)
        line = f"- {category.value}: {entry.definition}"
        if entry.scope_notes:
            line += f" {entry.scope_notes}"
        blocks.append(line)
    return "\n".join(blocks)


def _render_example(position: int, report: ClinicalReport, gold: StructuredReport) -> str:
    return (
        f"Example {position}:\n"
        "Clinical report:\n"
        f"{report.text}\n"
        "Output:\n"
        f"{serialize_report(gold)}"
    )


def build_advanced_prompt(
    report: ClinicalReport,
    examples: Sequence[tuple[ClinicalReport, StructuredReport]],
    definitions: DefinitionSet,
) -> PromptSpec:
    """Full task description, category definitions, and in-context examples.

    Examples must already be ranked (most similar first); they render in
    that order, each as the example report followed by the canonical
    serialization of its gold annotation.
    """
    if not examples:
        raise EmptyExamples("advanced prompting requires at least one in-context example")
    example_blocks = "\n\n".join(
        _render_example(i + 1, example_report, gold)
        for i, (example_report, gold) in enumerate(examples)
    )
    user_text = (
        "Extract structured information from the clinical report at the end.\n"
        "Each category is defined below; extract only information that fits the\n"
        "definition and its scope.\n\n"
        "Category definitions:\n"
        f"{_render_definitions(definitions)}\n\n"
        f"{OUTPUT_RULES}\n\n"
        "Worked examples:\n\n"
        f"{example_blocks}\n\n"
        "Now extract from this clinical report:\n"
        f"{report.text}\n"
        "Output:"
    )
    return PromptSpec(
        mode="advanced",
        system_text=SYSTEM_TEXT,
        user_text=user_text,
        example_count=len(examples),
    )


def render_minimal_user_text(report_text: str) -> str:
    """Shared minimal-instruction template.

    Both build_minimal_prompt and the fine-tuning data builder call this,
    so trained and served instruction formats cannot drift apart.
    """
    return f"{MINIMAL_INSTRUCTION}\n\nClinical report:\n{report_text}"


def minimal_template_hash() -> str:
    """Content hash of the minimal template, recorded in manifests so a
    fine-tuned model's training data can be checked against it."""
    return hashlib.sha256(render_minimal_user_text("{report}").encode("utf-8")).hexdigest()


def build_minimal_prompt(report: ClinicalReport) -> PromptSpec:
    """Short fixed instruction for fine-tuned models; no definitions or examples."""
    return PromptSpec(
        mode="minimal",
        system_text=SYSTEM_TEXT,
        user_text=render_minimal_user_text(report.text),
    )
