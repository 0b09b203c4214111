"""Concept-level disagreement analysis between predictions and gold.

Concepts are matched greedily by normalized exact string equality, same
category before cross category, each concept consumed at most once.
What remains unmatched classifies into three error kinds:

    missing              gold concept with no predicted counterpart
    wrongly_categorized  concept extracted under the wrong category
    spurious             predicted concept with no gold counterpart

An optional fuzzy pass annotates near-misses and in-context-copy
suspicions; annotations never move a concept between buckets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from clinex.inference import ExtractionResult
from clinex.metrics import tokenize
from clinex.schema import Category, StructuredReport

log = logging.getLogger(__name__)

MISSING = "missing"
WRONGLY_CATEGORIZED = "wrongly_categorized"
SPURIOUS = "spurious"


def normalize_concept(concept: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return " ".join(concept.lower().split())


@dataclass(frozen=True)
class ConceptAlignment:
    """Disjoint buckets covering every gold and predicted concept once."""

    same_category_matches: tuple[tuple[Category, str, str], ...]
    cross_category_matches: tuple[tuple[Category, Category, str, str], ...]
    unmatched_gold: tuple[tuple[Category, str], ...]
    unmatched_pred: tuple[tuple[Category, str], ...]


def _indexed_concepts(report: StructuredReport) -> list[tuple[Category, str, str]]:
    return [
        (category, concept, normalize_concept(concept))
        for category, concepts in report
        for concept in concepts
    ]


def align_concepts(pred: StructuredReport, gold: StructuredReport) -> ConceptAlignment:
    """Greedy matching by normalized equality, same-category first.

    Iteration follows canonical category order and in-category concept
    order, so the alignment is deterministic for any input.
    """
    gold_items = _indexed_concepts(gold)
    pred_items = _indexed_concepts(pred)
    pred_used = [False] * len(pred_items)

    same: list[tuple[Category, str, str]] = []
    gold_remaining: list[tuple[Category, str, str]] = []
    for gold_cat, gold_concept, gold_norm in gold_items:
        match = None
        for i, (pred_cat, _pred_concept, pred_norm) in enumerate(pred_items):
            if not pred_used[i] and pred_cat is gold_cat and pred_norm == gold_norm:
                match = i
                break
        if match is None:
            gold_remaining.append((gold_cat, gold_concept, gold_norm))
        else:
            pred_used[match] = True
            same.append((gold_cat, gold_concept, pred_items[match][1]))

    cross: list[tuple[Category, Category, str, str]] = []
    unmatched_gold: list[tuple[Category, str]] = []
    for gold_cat, gold_concept, gold_norm in gold_remaining:
        match = None
        for i, (_pred_cat, _pred_concept, pred_norm) in enumerate(pred_items):
            if not pred_used[i] and pred_norm == gold_norm:
                match = i
                break
        if match is None:
            unmatched_gold.append((gold_cat, gold_concept))
        else:
            pred_used[match] = True
            cross.append((gold_cat, pred_items[match][0], gold_concept, pred_items[match][1]))

    unmatched_pred = tuple(
        (pred_cat, pred_concept)
        for used, (pred_cat, pred_concept, _norm) in zip(pred_used, pred_items)
        if not used
    )
    return ConceptAlignment(tuple(same), tuple(cross), tuple(unmatched_gold), unmatched_pred)


@dataclass(frozen=True)
class ErrorRecord:
    """One classified disagreement, attributable to a sample."""

    kind: str  # MISSING | WRONGLY_CATEGORIZED | SPURIOUS
    category: Category  # gold category for missing/wrong, predicted for spurious
    concept: str
    sample_id: str = ""
    target_category: Category | None = None  # predicted category, wrongly_categorized only
    note: str | None = None  # fuzzy / ICL-copy annotations

    def __post_init__(self) -> None:
        if (self.kind == WRONGLY_CATEGORIZED) != (self.target_category is not None):
            raise ValueError("target_category is set exactly for wrongly_categorized records")

    def to_record(self) -> dict:
        record = {"kind": self.kind, "category": self.category.value, "concept": self.concept}
        if self.sample_id:
            record["sample_id"] = self.sample_id
        if self.target_category is not None:
            record["target_category"] = self.target_category.value
        if self.note:
            record["note"] = self.note
        return record


def classify_errors(alignment: ConceptAlignment, sample_id: str = "") -> list[ErrorRecord]:
    """Unmatched gold → missing; cross matches → wrongly categorized;
    unmatched predictions → spurious."""
    records: list[ErrorRecord] = []
    for category, concept in alignment.unmatched_gold:
        records.append(ErrorRecord(MISSING, category, concept, sample_id))
    for gold_cat, pred_cat, gold_concept, _pred_concept in alignment.cross_category_matches:
        records.append(
            ErrorRecord(
                WRONGLY_CATEGORIZED, gold_cat, gold_concept, sample_id, target_category=pred_cat
            )
        )
    for category, concept in alignment.unmatched_pred:
        records.append(ErrorRecord(SPURIOUS, category, concept, sample_id))
    return records


def _jaccard(a: str, b: str) -> float:
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def annotate_near_misses(
    records: Sequence[ErrorRecord],
    alignment: ConceptAlignment,
    threshold: float = 0.5,
) -> list[ErrorRecord]:
    """Mark missing/spurious records whose concept nearly matches one left
    on the other side (token-set Jaccard >= threshold).  Annotation only:
    counts and kinds never change."""
    annotated: list[ErrorRecord] = []
    for record in records:
        note = None
        if record.kind == MISSING:
            others = alignment.unmatched_pred
        elif record.kind == SPURIOUS:
            others = alignment.unmatched_gold
        else:
            others = ()
        best = None
        for _category, other in others:
            score = _jaccard(record.concept, other)
            if score >= threshold and (best is None or score > best[0]):
                best = (score, other)
        if best is not None:
            note = f"near-miss of {best[1]!r} (jaccard {best[0]:.2f})"
        annotated.append(replace(record, note=note) if note else record)
    return annotated


def flag_icl_copies(
    records: Sequence[ErrorRecord],
    icl_concepts: Iterable[str],
) -> list[ErrorRecord]:
    """Mark spurious concepts that string-match a concept shown in the
    prompt's in-context examples: likely copied, not extracted."""
    normalized = {normalize_concept(c) for c in icl_concepts}
    flagged = []
    for record in records:
        if record.kind == SPURIOUS and normalize_concept(record.concept) in normalized:
            note = "copied from in-context learning examples"
            note = f"{record.note}; {note}" if record.note else note
            flagged.append(replace(record, note=note))
        else:
            flagged.append(record)
    return flagged


@dataclass(frozen=True)
class ReviewItem:
    sample_id: str
    raw_completion: str | None
    parsed: StructuredReport | None
    gold: StructuredReport
    errors: tuple[ErrorRecord, ...]

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "raw_completion": self.raw_completion,
            "parsed": self.parsed.as_dict() if self.parsed is not None else None,
            "gold": self.gold.as_dict(),
            "errors": [error.to_record() for error in self.errors],
        }


@dataclass(frozen=True)
class ReviewBundle:
    items: tuple[ReviewItem, ...]
    requested: int
    note: str = ""

    @property
    def shortfall(self) -> int:
        return max(0, self.requested - len(self.items))


def errors_for_result(
    result: ExtractionResult,
    gold: StructuredReport,
    icl_concepts: Iterable[str] = (),
    fuzzy: bool = True,
) -> tuple[ErrorRecord, ...]:
    """Classified errors for one extraction; a parse failure counts every
    gold concept as missing (the prediction extracted nothing usable)."""
    pred = result.parsed if result.parsed is not None else StructuredReport()
    alignment = align_concepts(pred, gold)
    records = classify_errors(alignment, sample_id=result.sample_id)
    if fuzzy:
        records = annotate_near_misses(records, alignment)
    if icl_concepts:
        records = flag_icl_copies(records, icl_concepts)
    return tuple(records)


def sample_errors(
    pairs: Sequence[tuple[ExtractionResult, StructuredReport]],
    n: int,
    seed: int,
    icl_concepts_by_sample: Mapping[str, Sequence[str]] | None = None,
) -> ReviewBundle:
    """Deterministic random sample of n error-bearing predictions.

    'Incorrect prediction' means at least one classified error.  With
    fewer than n available, everything is returned with a shortfall note.
    """
    icl_concepts_by_sample = icl_concepts_by_sample or {}
    items: list[ReviewItem] = []
    for result, gold in pairs:
        errors = errors_for_result(
            result, gold, icl_concepts=icl_concepts_by_sample.get(result.sample_id, ())
        )
        if errors:
            items.append(
                ReviewItem(result.sample_id, result.raw_completion, result.parsed, gold, errors)
            )
    order = np.random.default_rng(seed).permutation(len(items))
    chosen = [items[i] for i in order[:n]]
    note = ""
    if len(chosen) < n:
        note = f"only {len(chosen)} error-bearing predictions available (requested {n})"
    return ReviewBundle(tuple(chosen), requested=n, note=note)


def write_review_bundle(bundle: ReviewBundle, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for item in bundle.items:
            handle.write(json.dumps(item.to_record(), ensure_ascii=False) + "\n")


def render_error_digest(bundle: ReviewBundle) -> str:
    """Human-readable digest grouped by error kind and category."""
    by_kind: dict[str, dict[str, list[ErrorRecord]]] = {}
    for item in bundle.items:
        for error in item.errors:
            by_kind.setdefault(error.kind, {}).setdefault(error.category.value, []).append(error)
    lines = [f"reviewed {len(bundle.items)} error-bearing predictions"]
    if bundle.note:
        lines.append(f"note: {bundle.note}")
    for kind in (MISSING, WRONGLY_CATEGORIZED, SPURIOUS):
        groups = by_kind.get(kind)
        if not groups:
            continue
        total = sum(len(records) for records in groups.values())
        lines.append(f"\n{kind} ({total}):")
        for category in sorted(groups):
            for error in groups[category]:
                suffix = ""
                if error.target_category is not None:
                    suffix = f" -> predicted under {error.target_category.value}"
                if error.note:
                    suffix += f"  [{error.note}]"
                lines.append(f"  {category}: {error.concept!r}{suffix} ({error.sample_id})")
    return "\n".join(lines)
