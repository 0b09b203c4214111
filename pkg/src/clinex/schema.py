"""Closed 15-category structured representation of a clinical report.

A structured report maps each category to an ordered list of concept
strings.  Model output is parsed into this representation and serialized
back as a canonical JSON object whose values join concepts with "; ".
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

log = logging.getLogger(__name__)

CONCEPT_DELIMITER = ";"

LANGUAGES = ("en", "de")


class Category(str, enum.Enum):
    """The fixed, closed set of extraction categories.

    Definition order is the canonical order used for serialization and
    for every rendered table.
    """

    AGE = "age"
    COMORBIDITIES = "comorbidities"
    DIAGNOSIS = "diagnosis"
    DIAGNOSTIC_PROCEDURES = "diagnostic_procedures"
    FAMILY_HISTORY = "family_history"
    GENDER = "gender"
    INTERVENTIONAL_THERAPY = "interventional_therapy"
    LABORATORY_VALUES = "laboratory_values"
    LIFE_STYLE = "life_style"
    MEDICAL_SURGICAL_HISTORY = "medical_surgical_history"
    PATHOLOGY = "pathology"
    PATIENT_OUTCOME_ASSESSMENT = "patient_outcome_assessment"
    PHARMACOLOGICAL_THERAPY = "pharmacological_therapy"
    SIGNS_SYMPTOMS = "signs_symptoms"
    SOCIAL_HISTORY = "social_history"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


CATEGORY_ORDER: tuple[Category, ...] = tuple(Category)
CATEGORY_NAMES: tuple[str, ...] = tuple(c.value for c in CATEGORY_ORDER)
_CATEGORY_BY_NAME: dict[str, Category] = {c.value: c for c in CATEGORY_ORDER}
_CATEGORY_RANK: dict[Category, int] = {c: i for i, c in enumerate(CATEGORY_ORDER)}


class SchemaError(ValueError):
    """Invalid category, concept, or report construction input."""


class ParseFailure(Exception):
    """Model completion text could not be parsed into a structured report.

    The failure keeps the full raw completion so the error-analysis
    workflow can audit what the model actually said.
    """

    NO_OBJECT = "no_object_found"
    MALFORMED = "malformed_object"
    UNKNOWN_CATEGORY = "unknown_category"
    NON_TEXT_VALUE = "non_text_value"

    def __init__(self, kind: str, message: str, *, raw: str, key: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.raw = raw
        self.key = key


def split_concepts(raw: str) -> list[str]:
    """Split a category value string on semicolons into concept strings.

    Each segment is whitespace-trimmed, empty segments are dropped, and
    the original order is preserved.  Total: never raises.
    """
    return [seg for seg in (part.strip() for part in raw.split(CONCEPT_DELIMITER)) if seg]


def _clean_concepts(value: Iterable[str] | str) -> tuple[str, ...]:
    """Normalize a raw category value into a concept tuple."""
    if isinstance(value, str):
        return tuple(split_concepts(value))
    concepts: list[str] = []
    for item in value:
        if not isinstance(item, str):
            raise SchemaError(f"concept must be a string, got {type(item).__name__}")
        if CONCEPT_DELIMITER in item:
            # Nested delimiters are re-split rather than rejected so that
            # list-valued model output normalizes the same way strings do.
            concepts.extend(split_concepts(item))
            continue
        item = item.strip()
        if item:
            concepts.append(item)
    return tuple(concepts)


@dataclass(frozen=True)
class ClinicalReport:
    """One free-text patient summary."""

    id: str
    text: str
    language: str = "en"

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("report id must be nonempty")
        if not self.text.strip():
            raise SchemaError(f"report {self.id!r}: text is empty")
        if self.language not in LANGUAGES:
            raise SchemaError(f"report {self.id!r}: unknown language tag {self.language!r}")


@dataclass(frozen=True)
class StructuredReport:
    """Mapping from categories to ordered concept lists.

    Entries are stored in canonical category order; an empty concept list
    normalizes to category absence, so two reports are equal exactly when
    their present categories and concepts agree.
    """

    entries: tuple[tuple[Category, tuple[str, ...]], ...] = ()

    def __post_init__(self) -> None:
        seen: set[Category] = set()
        for category, concepts in self.entries:
            if not isinstance(category, Category):
                raise SchemaError(f"key {category!r} is not a Category")
            if category in seen:
                raise SchemaError(f"duplicate category {category.value!r}")
            seen.add(category)
            if not concepts:
                raise SchemaError(f"category {category.value!r} has an empty concept list")
            for concept in concepts:
                if not concept or not concept.strip():
                    raise SchemaError(f"category {category.value!r} has an empty concept")
                if CONCEPT_DELIMITER in concept:
                    raise SchemaError(
                        f"category {category.value!r}: concept {concept!r} contains the delimiter"
                    )
        ranks = [_CATEGORY_RANK[c] for c, _ in self.entries]
        if ranks != sorted(ranks):
            raise SchemaError("entries are not in canonical category order; use build()")

    @classmethod
    def build(cls, data: Mapping[Category | str, Iterable[str] | str]) -> "StructuredReport":
        """Construct a report from a category→value mapping.

        String values are split on semicolons; iterable values are taken
        as concept lists.  Empty values drop out.  Unknown category names
        raise SchemaError.
        """
        by_category: dict[Category, tuple[str, ...]] = {}
        for key, value in data.items():
            if isinstance(key, Category):
                category = key
            else:
                category = _CATEGORY_BY_NAME.get(key)  # type: ignore[arg-type]
                if category is None:
                    raise SchemaError(f"unknown category {key!r}")
            if category in by_category:
                raise SchemaError(f"duplicate category {category.value!r}")
            concepts = _clean_concepts(value)
            if concepts:
                by_category[category] = concepts
        entries = tuple(
            (category, by_category[category])
            for category in CATEGORY_ORDER
            if category in by_category
        )
        return cls(entries)

    @property
    def categories(self) -> tuple[Category, ...]:
        return tuple(category for category, _ in self.entries)

    def get(self, category: Category) -> tuple[str, ...]:
        """Concepts for a category; empty tuple when absent."""
        for cat, concepts in self.entries:
            if cat is category:
                return concepts
        return ()

    def joined(self, category: Category) -> str:
        """The canonical '; '-joined value string for a category."""
        return f"{CONCEPT_DELIMITER} ".join(self.get(category))

    def as_dict(self) -> dict[str, list[str]]:
        return {category.value: list(concepts) for category, concepts in self.entries}

    def __contains__(self, category: object) -> bool:
        return any(cat is category for cat, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[Category, tuple[str, ...]]]:
        return iter(self.entries)


EMPTY_REPORT = StructuredReport()


def serialize_report(report: StructuredReport) -> str:
    """Render a report as its canonical JSON object text.

    Keys appear in canonical category order and each value joins its
    concepts with '; '.  Output is byte-deterministic.
    """
    payload = {category.value: report.joined(category) for category in report.categories}
    return json.dumps(payload, ensure_ascii=False, separators=(", ", ": "))


def _candidate_objects(raw: str) -> Iterator[dict]:
    """Yield JSON objects decodable at successive '{' positions in raw."""
    decoder = json.JSONDecoder()
    start = raw.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(raw, start)
        except ValueError:
            pass
        else:
            if isinstance(value, dict):
                yield value
        start = raw.find("{", start + 1)


def _coerce_value(key: str, value: object, raw: str, lenient: bool) -> str | None:
    """Turn a decoded JSON value into a raw category value string.

    Lenient mode coerces scalars and flattens string lists, dropping
    anything else with a warning; strict mode accepts strings only.
    Returns None when the value should be treated as absent.
    """
    if isinstance(value, str):
        return value
    if not lenient:
        raise ParseFailure(
            ParseFailure.NON_TEXT_VALUE,
            f"category {key!r} has non-string value {value!r}",
            raw=raw,
            key=key,
        )
    if value is None:
        log.warning("parse: dropping null value for category %r", key)
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return json.dumps(value)
    if isinstance(value, list) and all(isinstance(item, str) for item in value):
        return f"{CONCEPT_DELIMITER} ".join(value)
    log.warning("parse: dropping unusable value for category %r: %r", key, value)
    return None


def parse_model_output(raw: str, mode: str = "lenient") -> StructuredReport:
    """Parse model completion text into a StructuredReport.

    Locates the first well-formed JSON object in the text (skipping
    surrounding prose and code fences) and maps its keys onto the closed
    category set.  Lenient mode drops unknown keys and coerces non-string
    scalars, logging a warning for each; strict mode fails on both.

    Raises ParseFailure; never anything else, for any string input.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    lenient = mode == "lenient"

    obj: dict | None = next(_candidate_objects(raw), None)
    if obj is None:
        if "{" in raw:
            raise ParseFailure(
                ParseFailure.MALFORMED,
                "text contains '{' but no well-formed JSON object",
                raw=raw,
            )
        raise ParseFailure(ParseFailure.NO_OBJECT, "no JSON object in completion", raw=raw)

    values: dict[Category, str] = {}
    for key, value in obj.items():
        category = _CATEGORY_BY_NAME.get(key)
        if category is None:
            if lenient:
                log.warning("parse: dropping unknown category %r", key)
                continue
            raise ParseFailure(
                ParseFailure.UNKNOWN_CATEGORY,
                f"unknown category {key!r}",
                raw=raw,
                key=key,
            )
        coerced = _coerce_value(key, value, raw, lenient)
        if coerced is None:
            continue
        if category in values:
            log.warning("parse: duplicate category %r, keeping last", key)
        values[category] = coerced

    try:
        return StructuredReport.build(values)
    except SchemaError as exc:  # pragma: no cover - build() is total over str values
        raise ParseFailure(ParseFailure.MALFORMED, str(exc), raw=raw) from exc
