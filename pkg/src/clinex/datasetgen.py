"""Semi-automated dataset generation and validation workflow.

A strong teacher model annotates raw summaries through the advanced
prompt built around a fixed, manually curated set of seed examples (the
bootstrap: seed annotations exist before any corpus does).  Outputs that
fail schema validation are quarantined with their raw text, never
silently retried.  Human validation runs on a stratified per-category
sample sheet, whose judgments yield per-category error rates.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from clinex.corpus import Corpus, CorpusSample
from clinex.inference import ModelEndpoint, TransportError, complete_many
from clinex.prompting import DefinitionSet, build_advanced_prompt
from clinex.schema import (
    CATEGORY_ORDER,
    Category,
    ClinicalReport,
    ParseFailure,
    StructuredReport,
    parse_model_output,
)

log = logging.getLogger(__name__)

JUDGMENT_CORRECT = "correct"
JUDGMENT_INCORRECT = "incorrect"


class DatasetGenError(Exception):
    pass


class UnjudgedRows(DatasetGenError):
    pass


@dataclass(frozen=True)
class AnnotationJob:
    """Everything one annotation pass needs."""

    summaries: tuple[ClinicalReport, ...]
    teacher: ModelEndpoint
    seed_examples: tuple[tuple[ClinicalReport, StructuredReport], ...]
    definitions: DefinitionSet

    def __post_init__(self) -> None:
        if not self.seed_examples:
            raise DatasetGenError("seed_examples must be nonempty")


@dataclass(frozen=True)
class QuarantinedOutput:
    report: ClinicalReport
    raw: str
    reason: str


def generate_annotations(
    job: AnnotationJob, limit: int = 4
) -> tuple[Corpus, tuple[QuarantinedOutput, ...]]:
    """Annotate every summary with the teacher; accept or quarantine.

    Accepted = leniently parseable into a valid structured report.  The
    seed examples are appended to every prompt unchanged (no retrieval:
    they predate any index).  accepted + quarantined covers the input;
    transport and auth errors propagate.
    """
    prompts = [
        (report.id, build_advanced_prompt(report, job.seed_examples, job.definitions))
        for report in job.summaries
    ]
    outcomes = complete_many(job.teacher, prompts, limit=limit)

    samples: list[CorpusSample] = []
    quarantine: list[QuarantinedOutput] = []
    for report, outcome in zip(job.summaries, outcomes):
        if outcome.error is not None:
            raise TransportError(f"annotation of {report.id!r} failed: {outcome.error}")
        try:
            gold = parse_model_output(outcome.text, mode="lenient")
        except ParseFailure as exc:
            quarantine.append(QuarantinedOutput(report, outcome.text, f"{exc.kind}: {exc}"))
            continue
        samples.append(
            CorpusSample(report=report, gold=gold, source_id=f"teacher:{job.teacher.model_name}")
        )
    log.info("annotated %d summaries: %d accepted, %d quarantined",
             len(job.summaries), len(samples), len(quarantine))
    return Corpus(tuple(samples)), tuple(quarantine)


def write_quarantine(quarantine: Sequence[QuarantinedOutput], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for item in quarantine:
            handle.write(
                json.dumps(
                    {"id": item.report.id, "text": item.report.text, "raw": item.raw, "reason": item.reason},
                    ensure_ascii=False,
                )
                + "\n"
            )


@dataclass(frozen=True)
class SheetRow:
    """One validation judgment slot: a category value of one sample."""

    sample_id: str
    category: Category
    gold_value: str
    judgment: str = ""


def draw_validation_sample(corpus: Corpus, per_category_n: int, seed: int) -> list[SheetRow]:
    """Stratified validation sheet: up to per_category_n samples per category.

    For each category (canonical order), draws uniformly without
    replacement among the samples where the category is present; fewer
    candidates than requested means all of them are drawn.  Fully
    deterministic per seed.
    """
    if per_category_n < 1:
        raise ValueError("per_category_n must be >= 1")
    rng = np.random.default_rng(seed)
    rows: list[SheetRow] = []
    for category in CATEGORY_ORDER:
        candidates = [sample for sample in corpus if category in sample.gold]
        if not candidates:
            continue
        take = min(per_category_n, len(candidates))
        chosen = sorted(rng.choice(len(candidates), size=take, replace=False).tolist())
        for i in chosen:
            sample = candidates[i]
            rows.append(SheetRow(sample.id, category, sample.gold.joined(category)))
    return rows


SHEET_COLUMNS = ("sample_id", "category", "gold_value", "judgment")


def write_sheet(rows: Sequence[SheetRow], path: str | Path) -> None:
    """Tab-separated sheet for offline human judgment entry."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(SHEET_COLUMNS)
        for row in rows:
            writer.writerow([row.sample_id, row.category.value, row.gold_value, row.judgment])


def read_sheet(path: str | Path) -> list[SheetRow]:
    rows: list[SheetRow] = []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != SHEET_COLUMNS:
            raise DatasetGenError(f"{path}: expected header {SHEET_COLUMNS}, got {header}")
        for record in reader:
            if not record:
                continue
            sample_id, category, gold_value, judgment = record
            rows.append(SheetRow(sample_id, Category(category), gold_value, judgment.strip()))
    return rows


@dataclass(frozen=True)
class ErrorRateEstimate:
    """Per-category judged counts, error counts and error-rate percent."""

    counts: Mapping[Category, tuple[int, int]]  # category → (judged, errors)

    def error_rate_pct(self, category: Category) -> float:
        judged, errors = self.counts[category]
        return 100.0 * errors / judged

    def categories(self) -> tuple[Category, ...]:
        return tuple(c for c in CATEGORY_ORDER if c in self.counts)

    def as_mapping(self) -> dict[Category, float]:
        return {category: self.error_rate_pct(category) for category in self.categories()}


def estimate_error_rates(rows: Sequence[SheetRow]) -> ErrorRateEstimate:
    """Per-category error percentage from a fully judged sheet."""
    unjudged = [
        row for row in rows
        if row.judgment.lower() not in (JUDGMENT_CORRECT, JUDGMENT_INCORRECT)
    ]
    if unjudged:
        first = unjudged[0]
        raise UnjudgedRows(
            f"{len(unjudged)} rows lack a correct/incorrect judgment "
            f"(first: {first.sample_id}/{first.category.value} = {first.judgment!r})"
        )
    counts: dict[Category, tuple[int, int]] = {}
    for row in rows:
        judged, errors = counts.get(row.category, (0, 0))
        counts[row.category] = (
            judged + 1,
            errors + (1 if row.judgment.lower() == JUDGMENT_INCORRECT else 0),
        )
    return ErrorRateEstimate(counts)


def render_error_rate_table(estimate: ErrorRateEstimate) -> str:
    """Judged categories in canonical order with counts and rates."""
    header = f"{'Category':<28} {'Judged':>7} {'Errors':>7} {'Error Rate (%)':>15}"
    lines = [header, "-" * len(header)]
    for category in estimate.categories():
        judged, errors = estimate.counts[category]
        lines.append(
            f"{category.value:<28} {judged:>7} {errors:>7} {estimate.error_rate_pct(category):>15.2f}"
        )
    return "\n".join(lines)
