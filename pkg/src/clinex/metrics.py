"""Per-category text-overlap, embedding-similarity and entity metrics.

Every metric yields precision/recall/F1 in [0, 1].  Category values are
scored on their '; '-joined concept strings; per-category means are then
macro-averaged across the 15 categories (mean over samples first, then
over categories).
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from clinex.schema import CATEGORY_ORDER, Category, StructuredReport

if TYPE_CHECKING:  # pragma: no cover
    from clinex.clients import EntityRecognizer, TokenEmbedder  # noqa: F401

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

METRIC_COLUMNS = ("rouge1", "rouge2", "rougeL", "bert", "entity")


class MetricError(ValueError):
    """Invalid metric input."""


class DimensionMismatch(MetricError):
    pass


class EmptyMatrix(MetricError):
    pass


class NothingScored(RuntimeError):
    """Aggregation input contained no scored cell."""


@dataclass(frozen=True)
class PRF:
    """Precision / recall / F1 triple; F1 is the harmonic mean of P and R."""

    precision: float
    recall: float
    f1: float

    def __post_init__(self) -> None:
        for name, value in (("precision", self.precision), ("recall", self.recall), ("f1", self.f1)):
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"{name} out of [0, 1]: {value}")
        expected = 0.0 if self.precision + self.recall == 0 else (
            2 * self.precision * self.recall / (self.precision + self.recall)
        )
        if abs(self.f1 - expected) > 1e-9:
            raise MetricError(f"f1 {self.f1} is not the harmonic mean of {self.precision}, {self.recall}")

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "PRF":
        if precision + recall == 0:
            return cls(precision, recall, 0.0)
        if precision == recall:
            return cls(precision, recall, precision)
        return cls(precision, recall, 2 * precision * recall / (precision + recall))

    def as_dict(self) -> dict[str, float]:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


PRF_ZERO = PRF(0.0, 0.0, 0.0)
PRF_ONE = PRF(1.0, 1.0, 1.0)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> PRF:
    """Clipped n-gram multiset overlap between token sequences, n in {1, 2}."""
    if n not in (1, 2):
        raise MetricError(f"n must be 1 or 2, got {n}")
    cand_grams = _ngrams(candidate, n)
    ref_grams = _ngrams(reference, n)
    overlap = sum((cand_grams & ref_grams).values())
    cand_total = sum(cand_grams.values())
    ref_total = sum(ref_grams.values())
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    return PRF.from_pr(precision, recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token_a in a:
        curr = [0] * (len(b) + 1)
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> PRF:
    """Longest-common-subsequence overlap between token sequences."""
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate) if candidate else 0.0
    recall = lcs / len(reference) if reference else 0.0
    return PRF.from_pr(precision, recall)


def bert_score(candidate: np.ndarray, reference: np.ndarray) -> PRF:
    """Greedy cosine matching between unit-norm token embedding matrices.

    Precision averages, over candidate rows, the best cosine against any
    reference row; recall is symmetric.  No IDF weighting and no baseline
    rescaling; negative best-matches clamp to 0 so scores stay in [0, 1].
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if candidate.ndim != 2 or reference.ndim != 2:
        raise MetricError("embedding matrices must be 2-D")
    if candidate.shape[0] == 0 or reference.shape[0] == 0:
        raise EmptyMatrix("embedding matrix has no rows")
    if candidate.shape[1] != reference.shape[1]:
        raise DimensionMismatch(
            f"embedding dims differ: {candidate.shape[1]} vs {reference.shape[1]}"
        )
    sims = np.clip(candidate @ reference.T, 0.0, 1.0)
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    return PRF.from_pr(precision, recall)


def entity_prf(predicted: Iterable[str], gold: Iterable[str]) -> PRF | None:
    """Set-overlap P/R/F1 over normalized entity strings.

    Returns None when both sets are empty: the cell must be skipped, not
    scored, since agreement on "no entities" carries no signal.
    """
    pred_set = set(predicted)
    gold_set = set(gold)
    if not pred_set and not gold_set:
        return None
    overlap = len(pred_set & gold_set)
    precision = overlap / len(pred_set) if pred_set else 0.0
    recall = overlap / len(gold_set) if gold_set else 0.0
    return PRF.from_pr(precision, recall)


@dataclass(frozen=True)
class CategoryScore:
    """All metric cells for one category of one (pred, gold) pair.

    A cell is None when it could not be scored; the matching note says
    why (no client configured, both entity sets empty, service error).
    """

    category: Category
    status: str  # "scored" | "skipped"
    rouge1: PRF | None = None
    rouge2: PRF | None = None
    rougeL: PRF | None = None
    bert: PRF | None = None
    entity: PRF | None = None
    skip_reason: str | None = None
    rouge_note: str | None = None
    bert_note: str | None = None
    entity_note: str | None = None

    def cell(self, metric: str) -> PRF | None:
        return getattr(self, metric)

    def to_record(self) -> dict:
        record: dict = {"category": self.category.value, "status": self.status}
        for metric in METRIC_COLUMNS:
            value = self.cell(metric)
            record[metric] = value.as_dict() if value is not None else None
        for key in ("skip_reason", "rouge_note", "bert_note", "entity_note"):
            value = getattr(self, key)
            if value:
                record[key] = value
        return record


def _normalized_entities(recognizer: "EntityRecognizer", text: str) -> set[str]:
    return {surface.strip().lower() for surface, _label in recognizer.entities(text) if surface.strip()}


def evaluate_pair(
    pred: StructuredReport,
    gold: StructuredReport,
    *,
    token_embedder: "TokenEmbedder | None" = None,
    entity_recognizer: "EntityRecognizer | None" = None,
) -> list[CategoryScore]:
    """Score every category present in either report.

    Both present: all metrics on the '; '-joined value strings.  Present
    on one side only: every available metric scores zero (a missed or
    invented category is an extraction error, not a skip).  Absent on
    both sides: skipped.  Client failures leave the affected cell unscored
    with a note; they never abort the pair.
    """
    scores: list[CategoryScore] = []
    for category in CATEGORY_ORDER:
        in_pred = category in pred
        in_gold = category in gold
        if not in_pred and not in_gold:
            scores.append(CategoryScore(category, "skipped", skip_reason="both-absent"))
            continue

        if not (in_pred and in_gold):
            scores.append(
                CategoryScore(
                    category,
                    "scored",
                    rouge1=PRF_ZERO,
                    rouge2=PRF_ZERO,
                    rougeL=PRF_ZERO,
                    bert=PRF_ZERO if token_embedder is not None else None,
                    entity=PRF_ZERO if entity_recognizer is not None else None,
                    bert_note=None if token_embedder is not None else "no-embedder",
                    entity_note=None if entity_recognizer is not None else "no-recognizer",
                )
            )
            continue

        pred_text = pred.joined(category)
        gold_text = gold.joined(category)
        pred_tokens = tokenize(pred_text)
        gold_tokens = tokenize(gold_text)

        # An n-gram cell where neither side has any n-grams carries no
        # signal; skip it rather than scoring an unearned zero.
        rouge1 = rouge2 = rougeL = None
        rouge_note: str | None = None
        if not pred_tokens and not gold_tokens:
            rouge_note = "no-tokens-both-sides"
        else:
            rouge1 = rouge_n(pred_tokens, gold_tokens, 1)
            rougeL = rouge_l(pred_tokens, gold_tokens)
            if len(pred_tokens) < 2 and len(gold_tokens) < 2:
                rouge_note = "no-bigrams-both-sides"
            else:
                rouge2 = rouge_n(pred_tokens, gold_tokens, 2)

        bert: PRF | None = None
        bert_note: str | None = None
        if token_embedder is None:
            bert_note = "no-embedder"
        else:
            try:
                _, cand_matrix = token_embedder.embed_tokens(pred_text)
                _, ref_matrix = token_embedder.embed_tokens(gold_text)
                bert = bert_score(cand_matrix, ref_matrix)
            except Exception as exc:
                bert_note = f"embedder-error: {exc}"
                log.warning("bert cell unscored for %s: %s", category.value, exc)

        entity: PRF | None = None
        entity_note: str | None = None
        if entity_recognizer is None:
            entity_note = "no-recognizer"
        else:
            try:
                entity = entity_prf(
                    _normalized_entities(entity_recognizer, pred_text),
                    _normalized_entities(entity_recognizer, gold_text),
                )
                if entity is None:
                    entity_note = "entity-sets-both-empty"
            except Exception as exc:
                entity_note = f"recognizer-error: {exc}"
                log.warning("entity cell unscored for %s: %s", category.value, exc)

        scores.append(
            CategoryScore(
                category,
                "scored",
                rouge1=rouge1,
                rouge2=rouge2,
                rougeL=rougeL,
                bert=bert,
                entity=entity,
                rouge_note=rouge_note,
                bert_note=bert_note,
                entity_note=entity_note,
            )
        )
    return scores


@dataclass(frozen=True)
class MetricMean:
    """Component-wise arithmetic mean of PRF values.

    Unlike PRF, the f1 component is the mean of per-item F1 scores, so it
    is generally not the harmonic mean of the averaged P and R.
    """

    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


def _mean_of(values: Sequence[PRF] | Sequence[MetricMean]) -> MetricMean:
    return MetricMean(
        precision=sum(v.precision for v in values) / len(values),
        recall=sum(v.recall for v in values) / len(values),
        f1=sum(v.f1 for v in values) / len(values),
    )


@dataclass(frozen=True)
class CellMean:
    """Mean PRF over the samples where the cell was scored."""

    mean: MetricMean
    count: int

    def to_record(self) -> dict:
        return {**self.mean.as_dict(), "n": self.count}


@dataclass(frozen=True)
class CategoryAggregate:
    category: Category
    cells: Mapping[str, CellMean]  # keyed by metric column, only scored cells
    scored_samples: int
    skipped_samples: int

    def cell(self, metric: str) -> CellMean | None:
        return self.cells.get(metric)


@dataclass(frozen=True)
class EvaluationReport:
    """Per-category means plus the macro average across categories.

    The macro mean for a metric averages the per-category means over the
    categories that scored at least one sample for that metric; excluded
    categories are listed per metric.
    """

    per_category: tuple[CategoryAggregate, ...]
    macro: Mapping[str, MetricMean]
    macro_excluded: Mapping[str, tuple[str, ...]]
    sample_count: int
    metadata: Mapping[str, object] = field(default_factory=dict)

    def category(self, category: Category) -> CategoryAggregate:
        for aggregate in self.per_category:
            if aggregate.category is category:
                return aggregate
        raise KeyError(category)

    def to_json_dict(self) -> dict:
        return {
            "format": "clinex-eval-report",
            "version": 1,
            "sample_count": self.sample_count,
            "metadata": dict(self.metadata),
            "macro": {metric: prf.as_dict() for metric, prf in self.macro.items()},
            "macro_excluded": {m: list(v) for m, v in self.macro_excluded.items() if v},
            "per_category": [
                {
                    "category": agg.category.value,
                    "scored_samples": agg.scored_samples,
                    "skipped_samples": agg.skipped_samples,
                    "cells": {metric: cell.to_record() for metric, cell in agg.cells.items()},
                }
                for agg in self.per_category
            ],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "EvaluationReport":
        if data.get("format") != "clinex-eval-report":
            raise ValueError("not an evaluation report record")
        per_category = []
        for entry in data["per_category"]:
            cells = {
                metric: CellMean(MetricMean(cell["p"], cell["r"], cell["f1"]), cell["n"])
                for metric, cell in entry["cells"].items()
            }
            per_category.append(
                CategoryAggregate(
                    Category(entry["category"]),
                    cells,
                    entry["scored_samples"],
                    entry["skipped_samples"],
                )
            )
        macro = {m: MetricMean(v["p"], v["r"], v["f1"]) for m, v in data["macro"].items()}
        excluded = {m: tuple(v) for m, v in data.get("macro_excluded", {}).items()}
        return cls(
            per_category=tuple(per_category),
            macro=macro,
            macro_excluded=excluded,
            sample_count=data["sample_count"],
            metadata=dict(data.get("metadata", {})),
        )


AVERAGING_ORDERS = ("category_first", "sample_first")


def aggregate(
    sample_scores: Sequence[Sequence[CategoryScore]],
    metadata: Mapping[str, object] | None = None,
    order: str = "category_first",
) -> EvaluationReport:
    """Average CategoryScores into per-category and macro means.

    Each per-category metric cell averages over the samples where that
    cell was scored; denominators are recorded per cell.  The macro mean
    follows `order`: "category_first" (default) averages the per-category
    means across categories; "sample_first" macro-averages within each
    sample first, then across samples.  The choice is stamped into the
    report metadata.  Raises NothingScored when no cell anywhere was
    scored.
    """
    if order not in AVERAGING_ORDERS:
        raise ValueError(f"order must be one of {AVERAGING_ORDERS}, got {order!r}")
    by_category: dict[Category, list[CategoryScore]] = {c: [] for c in CATEGORY_ORDER}
    for scores in sample_scores:
        for score in scores:
            by_category[score.category].append(score)

    aggregates: list[CategoryAggregate] = []
    any_scored = False
    for category in CATEGORY_ORDER:
        scores = by_category[category]
        cells: dict[str, CellMean] = {}
        for metric in METRIC_COLUMNS:
            values = [s.cell(metric) for s in scores if s.cell(metric) is not None]
            if values:
                cells[metric] = CellMean(_mean_of(values), len(values))
                any_scored = True
        aggregates.append(
            CategoryAggregate(
                category,
                cells,
                scored_samples=sum(1 for s in scores if s.status == "scored"),
                skipped_samples=sum(1 for s in scores if s.status == "skipped"),
            )
        )
    if not any_scored:
        raise NothingScored("no category of any sample produced a scored cell")

    macro: dict[str, MetricMean] = {}
    macro_excluded: dict[str, tuple[str, ...]] = {}
    for metric in METRIC_COLUMNS:
        excluded = tuple(agg.category.value for agg in aggregates if metric not in agg.cells)
        macro_excluded[metric] = excluded
        if order == "category_first":
            means = [agg.cells[metric].mean for agg in aggregates if metric in agg.cells]
        else:
            means = []
            for scores in sample_scores:
                cells = [s.cell(metric) for s in scores if s.cell(metric) is not None]
                if cells:
                    means.append(_mean_of(cells))
        if means:
            macro[metric] = _mean_of(means)
            if excluded:
                log.warning(
                    "macro %s excludes %d categories with no scored samples: %s",
                    metric,
                    len(excluded),
                    ", ".join(excluded),
                )

    return EvaluationReport(
        per_category=tuple(aggregates),
        macro=macro,
        macro_excluded=macro_excluded,
        sample_count=len(sample_scores),
        metadata={**dict(metadata or {}), "averaging_order": order},
    )
