"""Experiment orchestration: config, end-to-end runs, report rendering.

One configuration file drives split → (index) → extraction → scoring →
aggregation; every artifact lands in the output directory together with
a manifest of the hashes and seeds that produced it.  No timestamps are
written anywhere, so a rerun against deterministic services reproduces
every artifact byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from clinex import __version__
from clinex.clients import (
    entity_recognizer_from_config,
    sentence_embedder_from_config,
    token_embedder_from_config,
)
from clinex.corpus import FieldAdapter, SplitSpec, load_corpus, split_corpus
from clinex.inference import (
    Decoding,
    ExtractionResult,
    ModelEndpoint,
    PromptDeps,
    RetryPolicy,
    auth_headers,
    run_batch,
    write_results,
)
from clinex.metrics import (
    CategoryScore,
    EvaluationReport,
    aggregate,
    evaluate_pair,
)
from clinex.prompting import load_definitions, minimal_template_hash
from clinex.retrieval import build_index, load_index
from clinex.schema import StructuredReport

log = logging.getLogger(__name__)

MODES = ("naive", "advanced", "minimal")

# Rendered metric columns, in table order.
REPORT_COLUMNS = (
    ("R-1", "rouge1", "f1"),
    ("R-2", "rouge2", "f1"),
    ("R-L", "rougeL", "f1"),
    ("BERTSc F1", "bert", "f1"),
    ("Entity P", "entity", "precision"),
    ("Entity R", "entity", "recall"),
    ("Entity F1", "entity", "f1"),
)


class ConfigInvalid(Exception):
    """Bad experiment configuration, detected before any network call."""


class EmptyInput(Exception):
    pass


class SchemaMismatch(Exception):
    """Report files disagree on format or version."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs, resolved and validated."""

    corpus_path: Path
    mode: str
    endpoint: ModelEndpoint
    output_dir: Path
    seed: int = 0
    train_fraction: float = 0.9
    corpus_format: str = "auto"
    language: str | None = "en"
    field_overrides: Mapping[str, str] = field(default_factory=dict)
    retrieval_m: int = 3
    index_path: Path | None = None
    embedder_config: Mapping[str, object] | None = None
    definitions_source: str = "en-v1"
    token_embedder_config: Mapping[str, object] | None = None
    entity_recognizer_config: Mapping[str, object] | None = None
    concurrency: int = 4
    eval_limit: int | None = None
    averaging_order: str = "category_first"

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.averaging_order not in ("category_first", "sample_first"):
            problems.append(f"unknown averaging_order {self.averaging_order!r}")
        if not self.corpus_path.exists():
            problems.append(f"corpus file does not exist: {self.corpus_path}")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.concurrency < 1:
            problems.append("concurrency must be >= 1")
        if self.retrieval_m < 1:
            problems.append("retrieval m must be >= 1")
        if self.mode == "advanced":
            if self.index_path is not None and not self.index_path.exists():
                problems.append(f"index file does not exist: {self.index_path}")
            if self.embedder_config is None:
                problems.append(
                    "advanced mode requires retrieval.embedder (a query embedder is needed "
                    "even when retrieval.index_path is set)"
                )
            try:
                load_definitions(self.definitions_source)
            except Exception as exc:
                problems.append(f"cannot load definitions {self.definitions_source!r}: {exc}")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def field_adapter(self) -> FieldAdapter:
        overrides = {}
        for role, attr in (
            ("id", "id_fields"),
            ("text", "text_fields"),
            ("gold", "gold_fields"),
            ("language", "language_fields"),
            ("source", "source_fields"),
        ):
            if role in self.field_overrides:
                overrides[attr] = (self.field_overrides[role],)
        return FieldAdapter(**overrides) if overrides else FieldAdapter()

    def to_canonical_dict(self) -> dict:
        return {
            "corpus_path": str(self.corpus_path),
            "corpus_format": self.corpus_format,
            "language": self.language,
            "field_overrides": dict(self.field_overrides),
            "mode": self.mode,
            "endpoint": {
                "base_url": self.endpoint.base_url,
                "model_name": self.endpoint.model_name,
                "temperature": self.endpoint.decoding.temperature,
                "max_output_tokens": self.endpoint.decoding.max_output_tokens,
                "auth_env": self.endpoint.auth_env,
                "max_attempts": self.endpoint.retry.max_attempts,
                "base_backoff": self.endpoint.retry.base_backoff,
            },
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "retrieval": {
                "m": self.retrieval_m,
                "index_path": str(self.index_path) if self.index_path else None,
                "embedder": dict(self.embedder_config) if self.embedder_config else None,
            },
            "definitions": self.definitions_source,
            "scoring": {
                "token_embedder": dict(self.token_embedder_config) if self.token_embedder_config else None,
                "entity_recognizer": dict(self.entity_recognizer_config) if self.entity_recognizer_config else None,
                "averaging_order": self.averaging_order,
            },
            "concurrency": self.concurrency,
            "eval_limit": self.eval_limit,
        }

    @property
    def config_hash(self) -> str:
        payload = json.dumps(self.to_canonical_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def config_from_dict(data: Mapping, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a config from a parsed JSON object; relative paths resolve
    against the config file's directory."""
    base_dir = base_dir or Path.cwd()

    def resolve(value: str | None) -> Path | None:
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else base_dir / path

    try:
        corpus_section = data["corpus"]
        endpoint_section = data["endpoint"]
        endpoint = ModelEndpoint(
            base_url=endpoint_section["base_url"],
            model_name=endpoint_section["model_name"],
            decoding=Decoding(
                temperature=float(endpoint_section.get("temperature", 0.0)),
                max_output_tokens=int(endpoint_section.get("max_output_tokens", 1024)),
            ),
            auth_env=endpoint_section.get("auth_env"),
            retry=RetryPolicy(
                max_attempts=int(endpoint_section.get("max_attempts", 3)),
                base_backoff=float(endpoint_section.get("base_backoff", 0.5)),
            ),
            timeout=float(endpoint_section.get("timeout", 120.0)),
        )
        retrieval_section = data.get("retrieval", {})
        scoring_section = data.get("scoring", {})
        return ExperimentConfig(
            corpus_path=resolve(corpus_section["path"]),
            corpus_format=corpus_section.get("format", "auto"),
            language=corpus_section.get("language", "en"),
            field_overrides=corpus_section.get("fields", {}),
            mode=data["mode"],
            endpoint=endpoint,
            output_dir=resolve(data["output_dir"]),
            seed=int(data.get("seed", 0)),
            train_fraction=float(data.get("split", {}).get("train_fraction", 0.9)),
            retrieval_m=int(retrieval_section.get("m", 3)),
            index_path=resolve(retrieval_section.get("index_path")),
            embedder_config=retrieval_section.get("embedder"),
            definitions_source=data.get("definitions", "en-v1"),
            token_embedder_config=scoring_section.get("token_embedder"),
            entity_recognizer_config=scoring_section.get("entity_recognizer"),
            averaging_order=scoring_section.get("averaging_order", "category_first"),
            concurrency=int(data.get("concurrency", 4)),
            eval_limit=data.get("eval_limit"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad configuration: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


@dataclass(frozen=True)
class ExperimentOutputs:
    results_path: Path
    scores_path: Path
    report_json_path: Path
    report_text_path: Path
    manifest_path: Path
    prompt_log_path: Path
    report: EvaluationReport
    failed_samples: int


def score_results(
    results: Sequence[ExtractionResult],
    gold_by_id: Mapping[str, StructuredReport],
    token_embedder=None,
    entity_recognizer=None,
) -> list[tuple[str, list[CategoryScore]]]:
    """Per-sample category scores; a failed extraction scores as an empty
    prediction (every gold category counts fully against it)."""
    scored = []
    for result in results:
        gold = gold_by_id[result.sample_id]
        pred = result.parsed if result.parsed is not None else StructuredReport()
        scores = evaluate_pair(
            pred, gold, token_embedder=token_embedder, entity_recognizer=entity_recognizer
        )
        scored.append((result.sample_id, scores))
    return scored


def write_scores(scored: Sequence[tuple[str, Sequence[CategoryScore]]], path: Path) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for sample_id, scores in scored:
            record = {"sample_id": sample_id, "scores": [s.to_record() for s in scores]}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def run_experiment(config: ExperimentConfig) -> ExperimentOutputs:
    """Execute one configured experiment end to end.

    Order: validate, resolve credentials, split, (index), extract with
    bounded concurrency, score, aggregate, render.  Per-sample failures
    end up in the results and count as failed_samples; they never abort
    the run.
    """
    config.validate()
    auth_headers(config.endpoint)  # resolve credentials before any request

    load_result = load_corpus(
        config.corpus_path,
        fmt=config.corpus_format,
        adapter=config.field_adapter(),
        language=config.language,
    )
    corpus = load_result.corpus
    train, test = split_corpus(corpus, SplitSpec(config.train_fraction, config.seed))

    deps = None
    embedder_id = None
    definitions_hash = None
    if config.mode == "advanced":
        embedder = sentence_embedder_from_config(dict(config.embedder_config))
        if config.index_path is not None:
            index = load_index(config.index_path)
        else:
            index = build_index(train, embedder)
        definitions = load_definitions(config.definitions_source)
        deps = PromptDeps(
            definitions=definitions,
            index=index,
            embedder=embedder,
            train=train.by_id(),
            m=config.retrieval_m,
        )
        embedder_id = index.embedder_id
        definitions_hash = definitions.content_hash

    reports = [sample.report for sample in test]
    if config.eval_limit is not None:
        reports = reports[: config.eval_limit]

    output_dir = config.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    results_path = output_dir / "results.jsonl"
    prompt_log_path = output_dir / "prompt_log.jsonl"
    # Journal is namespaced by config hash: resuming only ever reuses
    # completions produced under the identical configuration.
    journal_path = output_dir / f"journal-{config.config_hash[:12]}.jsonl"
    for stale in (prompt_log_path,):
        if stale.exists():
            stale.unlink()

    results = run_batch(
        config.endpoint,
        reports,
        config.mode,
        deps=deps,
        limit=config.concurrency,
        journal_path=journal_path,
        prompt_log_path=prompt_log_path,
    )
    write_results(results, results_path)

    token_embedder = (
        token_embedder_from_config(dict(config.token_embedder_config))
        if config.token_embedder_config
        else None
    )
    entity_recognizer = (
        entity_recognizer_from_config(dict(config.entity_recognizer_config))
        if config.entity_recognizer_config
        else None
    )
    gold_by_id = {sample.id: sample.gold for sample in test}
    scored = score_results(results, gold_by_id, token_embedder, entity_recognizer)
    scores_path = output_dir / "scores.jsonl"
    write_scores(scored, scores_path)

    metadata = {
        "model": config.endpoint.model_name,
        "mode": config.mode,
        "one_sided_categories": "scored zero",
        "empty_entity_cells": "skipped",
        "token_embedder": getattr(token_embedder, "embedder_id", None),
        "entity_recognizer": getattr(entity_recognizer, "model_id", None),
    }
    report = aggregate(
        [scores for _, scores in scored], metadata=metadata, order=config.averaging_order
    )
    report_json_path = output_dir / "report.json"
    report_json_path.write_text(
        json.dumps(report.to_json_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    report_text_path = output_dir / "report.txt"
    report_text_path.write_text(render_category_table(report) + "\n", encoding="utf-8")

    failed = sum(1 for result in results if not result.ok)
    manifest = {
        "package_version": __version__,
        "config": config.to_canonical_dict(),
        "config_hash": config.config_hash,
        "seed": config.seed,
        "corpus": {
            "samples": len(corpus),
            "rejected": len(load_result.rejected),
            "skipped_language": load_result.skipped_language,
            "ids_sha256": hashlib.sha256("\n".join(corpus.ids()).encode("utf-8")).hexdigest(),
        },
        "split": {"train": len(train), "test": len(test)},
        "evaluated": len(reports),
        "failed_samples": failed,
        "embedder_id": embedder_id,
        "definitions_hash": definitions_hash,
        "minimal_template_sha256": minimal_template_hash() if config.mode == "minimal" else None,
    }
    manifest_path = output_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )

    return ExperimentOutputs(
        results_path=results_path,
        scores_path=scores_path,
        report_json_path=report_json_path,
        report_text_path=report_text_path,
        manifest_path=manifest_path,
        prompt_log_path=prompt_log_path,
        report=report,
        failed_samples=failed,
    )


def _format_cell(value: float | None, best: bool) -> str:
    if value is None:
        return "      -  "
    marker = "*" if best else " "
    return f"{value:8.4f}{marker}"


def render_comparison(reports: Sequence[tuple[str, EvaluationReport]], markdown: bool = False) -> str:
    """One row per report's macro average, best value per column marked."""
    if not reports:
        raise EmptyInput("no reports to render")
    cell_values: list[list[float | None]] = []
    for _label, report in reports:
        row = []
        for _name, metric, component in REPORT_COLUMNS:
            mean = report.macro.get(metric)
            row.append(getattr(mean, component) if mean is not None else None)
        cell_values.append(row)
    best_per_column = []
    for column in range(len(REPORT_COLUMNS)):
        values = [row[column] for row in cell_values if row[column] is not None]
        best_per_column.append(max(values) if values else None)

    if markdown:
        lines = [
            "| run | " + " | ".join(name for name, _, _ in REPORT_COLUMNS) + " |",
            "| --- |" + " ---: |" * len(REPORT_COLUMNS),
        ]
        for (label, _report), row in zip(reports, cell_values):
            cells = []
            for value, best in zip(row, best_per_column):
                if value is None:
                    cells.append("-")
                elif best is not None and value == best:
                    cells.append(f"**{value:.4f}**")
                else:
                    cells.append(f"{value:.4f}")
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        return "\n".join(lines)

    width = max(len("run"), max(len(label) for label, _ in reports))
    header = f"{'run':<{width}} " + " ".join(f"{name:>9}" for name, _, _ in REPORT_COLUMNS)
    lines = [header, "-" * len(header)]
    for (label, _report), row in zip(reports, cell_values):
        cells = " ".join(
            _format_cell(value, best is not None and value == best)
            for value, best in zip(row, best_per_column)
        )
        lines.append(f"{label:<{width}} {cells}")
    return "\n".join(lines)


def render_category_table(report: EvaluationReport) -> str:
    """Per-category rows plus the macro row, in canonical category order."""
    header = (
        f"{'category':<28} "
        + " ".join(f"{name:>9}" for name, _, _ in REPORT_COLUMNS)
        + f" {'n':>5}"
    )
    lines = [header, "-" * len(header)]
    for agg in report.per_category:
        if not agg.cells and agg.scored_samples == 0:
            continue
        cells = []
        for _name, metric, component in REPORT_COLUMNS:
            cell = agg.cell(metric)
            cells.append(f"{getattr(cell.mean, component):>9.4f}" if cell else f"{'-':>9}")
        lines.append(f"{agg.category.value:<28} " + " ".join(cells) + f" {agg.scored_samples:>5}")
    macro_cells = []
    for _name, metric, component in REPORT_COLUMNS:
        mean = report.macro.get(metric)
        macro_cells.append(f"{getattr(mean, component):>9.4f}" if mean else f"{'-':>9}")
    lines.append("-" * len(header))
    lines.append(f"{'macro average':<28} " + " ".join(macro_cells) + f" {report.sample_count:>5}")
    return "\n".join(lines)


def load_report(path: str | Path) -> EvaluationReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise EmptyInput(f"cannot read report {path}: {exc}") from exc
    except ValueError as exc:
        raise SchemaMismatch(f"{path} is not a report file: {exc}") from exc
    if data.get("format") != "clinex-eval-report" or data.get("version") != 1:
        raise SchemaMismatch(f"{path}: unsupported report format/version")
    return EvaluationReport.from_json_dict(data)


def render_report(paths: Sequence[str | Path], markdown: bool = False) -> str:
    """Side-by-side comparison table of one or more aggregate reports."""
    if not paths:
        raise EmptyInput("no report paths given")
    loaded = []
    for path in paths:
        report = load_report(path)
        label = f"{report.metadata.get('model', '?')}/{report.metadata.get('mode', '?')}"
        loaded.append((label, report))
    return render_comparison(loaded, markdown=markdown)
