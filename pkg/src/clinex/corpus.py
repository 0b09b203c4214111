"""Annotated corpus loading, deterministic splitting, and per-category stats.

Input records are UTF-8 JSON, either line-delimited or a single array.
Field names are resolved through a configurable adapter so differently
shaped releases of the data ingest without code changes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from clinex.schema import (
    CATEGORY_ORDER,
    Category,
    ClinicalReport,
    SchemaError,
    StructuredReport,
)

log = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


class FileUnreadable(CorpusError):
    pass


class EmptyCorpus(CorpusError):
    pass


class DegenerateSplit(CorpusError):
    pass


@dataclass(frozen=True)
class CorpusSample:
    """One report paired with its gold structured annotation."""

    report: ClinicalReport
    gold: StructuredReport
    source_id: str = ""

    @property
    def id(self) -> str:
        return self.report.id


@dataclass(frozen=True)
class Corpus:
    """Immutable ordered collection of corpus samples."""

    samples: tuple[CorpusSample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[CorpusSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> CorpusSample:
        return self.samples[index]

    def ids(self) -> tuple[str, ...]:
        return tuple(sample.id for sample in self.samples)

    def by_id(self) -> dict[str, CorpusSample]:
        return {sample.id: sample for sample in self.samples}


@dataclass(frozen=True)
class SplitSpec:
    """Train fraction plus the seed driving the deterministic shuffle."""

    train_fraction: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class FieldAdapter:
    """Maps a record's field names onto (id, text, gold, language, source).

    Each attribute lists accepted names in priority order; the first one
    present in the record wins.  Override with single-element tuples to
    pin an exact layout.
    """

    id_fields: tuple[str, ...] = ("id", "sample_id", "patient_id", "patient_uid", "uid")
    text_fields: tuple[str, ...] = ("text", "report", "patient", "summary", "clinical_report")
    gold_fields: tuple[str, ...] = (
        "structured",
        "structured_information",
        "annotations",
        "gold",
        "output",
        "label",
    )
    language_fields: tuple[str, ...] = ("language", "lang")
    source_fields: tuple[str, ...] = ("source", "source_id", "article_id", "pmid", "pmcid")

    def _pick(self, record: Mapping, names: tuple[str, ...]):
        for name in names:
            if name in record:
                return record[name]
        return None

    def resolve(self, record: Mapping) -> tuple[str, str, object, str, str]:
        """Extract (id, text, gold, language, source_id); raises KeyError with the missing role."""
        sample_id = self._pick(record, self.id_fields)
        if sample_id is None:
            raise KeyError(f"no id field (looked for {', '.join(self.id_fields)})")
        text = self._pick(record, self.text_fields)
        if text is None:
            raise KeyError(f"no text field (looked for {', '.join(self.text_fields)})")
        gold = self._pick(record, self.gold_fields)
        if gold is None:
            raise KeyError(f"no gold structure field (looked for {', '.join(self.gold_fields)})")
        language = self._pick(record, self.language_fields) or "en"
        source = self._pick(record, self.source_fields) or ""
        return str(sample_id), str(text), gold, str(language), str(source)


@dataclass(frozen=True)
class RejectedRecord:
    index: int
    reason: str


@dataclass(frozen=True)
class LoadResult:
    """A loaded corpus plus the audit trail of what did not make it in."""

    corpus: Corpus
    rejected: tuple[RejectedRecord, ...]
    skipped_language: int


def _iter_records(path: Path, fmt: str) -> Iterator[tuple[int, object]]:
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc

    if fmt == "auto":
        stripped = raw.lstrip()
        fmt = "array" if stripped.startswith("[") else "jsonl"

    if fmt == "array":
        try:
            data = json.loads(raw)
        except ValueError as exc:
            raise FileUnreadable(f"{path} is not a JSON array: {exc}") from exc
        if not isinstance(data, list):
            raise FileUnreadable(f"{path}: top-level JSON value is not an array")
        yield from enumerate(data)
    elif fmt == "jsonl":
        index = 0
        for line in raw.splitlines():
            if not line.strip():
                continue
            try:
                yield index, json.loads(line)
            except ValueError:
                yield index, _BadLine(line)
            index += 1
    else:
        raise ValueError(f"format must be 'jsonl', 'array' or 'auto', got {fmt!r}")


class _BadLine:
    def __init__(self, line: str):
        self.line = line


def _build_gold(gold: object) -> StructuredReport:
    if isinstance(gold, str):
        gold = json.loads(gold)
    if not isinstance(gold, Mapping):
        raise SchemaError(f"gold structure is {type(gold).__name__}, expected object")
    return StructuredReport.build(gold)


def load_corpus(
    path: str | Path,
    fmt: str = "auto",
    adapter: FieldAdapter | None = None,
    language: str | None = "en",
) -> LoadResult:
    """Load corpus samples from a JSON or JSONL file.

    Every record either becomes a valid CorpusSample or lands in the
    rejected list with its index and reason.  Records whose language tag
    differs from the requested one are skipped, not rejected; pass
    language=None to ingest everything.
    """
    path = Path(path)
    adapter = adapter or FieldAdapter()
    samples: list[CorpusSample] = []
    rejected: list[RejectedRecord] = []
    skipped_language = 0
    seen_ids: set[str] = set()

    for index, record in _iter_records(path, fmt):
        if isinstance(record, _BadLine):
            rejected.append(RejectedRecord(index, "not valid JSON"))
            continue
        if not isinstance(record, Mapping):
            rejected.append(RejectedRecord(index, f"record is {type(record).__name__}, expected object"))
            continue
        try:
            sample_id, text, gold_raw, record_language, source = adapter.resolve(record)
        except KeyError as exc:
            rejected.append(RejectedRecord(index, str(exc.args[0])))
            continue
        if language is not None and record_language != language:
            skipped_language += 1
            continue
        if sample_id in seen_ids:
            rejected.append(RejectedRecord(index, f"duplicate id {sample_id!r}"))
            continue
        try:
            gold = _build_gold(gold_raw)
            report = ClinicalReport(id=sample_id, text=text, language=record_language)
        except (SchemaError, ValueError) as exc:
            rejected.append(RejectedRecord(index, str(exc)))
            continue
        seen_ids.add(sample_id)
        samples.append(CorpusSample(report=report, gold=gold, source_id=source))

    for item in rejected:
        log.warning("rejected record %d: %s", item.index, item.reason)
    if not samples:
        raise EmptyCorpus(f"{path}: no valid samples loaded ({len(rejected)} rejected)")
    return LoadResult(Corpus(tuple(samples)), tuple(rejected), skipped_language)


def load_reports(
    path: str | Path,
    fmt: str = "auto",
    adapter: FieldAdapter | None = None,
    language: str | None = "en",
) -> list[ClinicalReport]:
    """Load bare reports (no gold) from records carrying id and text."""
    path = Path(path)
    adapter = adapter or FieldAdapter()
    reports: list[ClinicalReport] = []
    seen: set[str] = set()
    for index, record in _iter_records(path, fmt):
        if isinstance(record, _BadLine) or not isinstance(record, Mapping):
            log.warning("skipping unreadable record %d", index)
            continue
        report_id = adapter._pick(record, adapter.id_fields)
        text = adapter._pick(record, adapter.text_fields)
        record_language = adapter._pick(record, adapter.language_fields) or "en"
        if report_id is None or text is None:
            log.warning("skipping record %d: missing id or text", index)
            continue
        if language is not None and record_language != language:
            continue
        if str(report_id) in seen:
            log.warning("skipping record %d: duplicate id %r", index, report_id)
            continue
        seen.add(str(report_id))
        reports.append(ClinicalReport(id=str(report_id), text=str(text), language=str(record_language)))
    if not reports:
        raise EmptyCorpus(f"{path}: no usable reports")
    return reports


def dump_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus in the canonical line-delimited layout.

    One JSON object per line with fields id, language, text, structured
    (category → '; '-joined value string) and source_id.  Reloading the
    file reproduces the corpus exactly.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for sample in corpus:
            record = {
                "id": sample.id,
                "language": sample.report.language,
                "text": sample.report.text,
                "structured": {
                    category.value: sample.gold.joined(category)
                    for category in sample.gold.categories
                },
                "source_id": sample.source_id,
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def split_corpus(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Deterministically partition a corpus into train and test.

    Samples are shuffled by a PCG64 generator seeded with spec.seed and
    prefix-split at round(N * train_fraction).  The two sides are always
    disjoint and cover the input.
    """
    n = len(corpus)
    if n == 0:
        raise EmptyCorpus("cannot split an empty corpus")
    n_train = int(math.floor(n * spec.train_fraction + 0.5))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(
            f"train_fraction {spec.train_fraction} over {n} samples leaves an empty side"
        )
    order = np.random.default_rng(spec.seed).permutation(n)
    train = Corpus(tuple(corpus[i] for i in order[:n_train]))
    test = Corpus(tuple(corpus[i] for i in order[n_train:]))
    return train, test


@dataclass(frozen=True)
class CategoryStats:
    """Per-category presence over a corpus."""

    sample_count: int
    present_counts: Mapping[Category, int]

    def presence_fraction(self, category: Category) -> float:
        return self.present_counts.get(category, 0) / self.sample_count

    def to_records(self) -> list[dict]:
        return [
            {
                "category": category.value,
                "present": self.present_counts.get(category, 0),
                "presence_pct": round(100.0 * self.presence_fraction(category), 4),
            }
            for category in CATEGORY_ORDER
        ]


def presence_stats(corpus: Corpus) -> CategoryStats:
    """Fraction of samples whose gold annotation contains each category."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot compute stats for an empty corpus")
    counts = {category: 0 for category in CATEGORY_ORDER}
    for sample in corpus:
        for category in sample.gold.categories:
            counts[category] += 1
    return CategoryStats(sample_count=len(corpus), present_counts=counts)


def render_presence_table(
    stats: CategoryStats,
    error_rates: Mapping[Category, float] | None = None,
) -> str:
    """Plain-text category table: presence percentages and, when supplied,
    per-category error rates in the same two-column layout."""
    header = f"{'Category':<28} {'Presence (%)':>12}"
    if error_rates is not None:
        header += f" {'Error Rate (%)':>15}"
    lines = [header, "-" * len(header)]
    for category in CATEGORY_ORDER:
        row = f"{category.value:<28} {100.0 * stats.presence_fraction(category):>12.2f}"
        if error_rates is not None:
            rate = error_rates.get(category)
            row += f" {rate:>15.2f}" if rate is not None else f" {'-':>15}"
        lines.append(row)
    lines.append(f"{'samples':<28} {stats.sample_count:>12}")
    return "\n".join(lines)
