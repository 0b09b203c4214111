"""Operator command line: one subcommand per workflow step.

Exit codes: 0 success, 1 partial failures (some samples failed or some
records were rejected), 2 configuration or auth errors.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from clinex import __version__
from clinex.clients import (
    entity_recognizer_from_config,
    sentence_embedder_from_config,
    token_embedder_from_config,
)
from clinex.corpus import (
    CorpusError,
    FieldAdapter,
    dump_corpus,
    load_corpus,
    load_reports,
    presence_stats,
    render_presence_table,
)
from clinex.datasetgen import (
    AnnotationJob,
    DatasetGenError,
    draw_validation_sample,
    estimate_error_rates,
    generate_annotations,
    read_sheet,
    render_error_rate_table,
    write_quarantine,
    write_sheet,
)
from clinex.error_analysis import render_error_digest, sample_errors, write_review_bundle
from clinex.experiment import (
    ConfigInvalid,
    EmptyInput,
    SchemaMismatch,
    load_config,
    render_report,
    run_experiment,
    score_results,
    write_scores,
)
from clinex.inference import (
    AuthError,
    InferenceError,
    ModelEndpoint,
    PromptDeps,
    load_prompt_log,
    read_results,
)
from clinex.metrics import aggregate
from clinex.prompting import (
    SYSTEM_TEXT,
    load_definitions,
    minimal_template_hash,
    render_minimal_user_text,
)
from clinex.retrieval import build_index, save_index
from clinex.schema import serialize_report

log = logging.getLogger(__name__)

CONFIG_ERRORS = (ConfigInvalid, AuthError, CorpusError, DatasetGenError, EmptyInput, SchemaMismatch, ValueError)


def guarded(fn):
    """Map command outcomes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs) or 0
        except CONFIG_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            code = 2
        except InferenceError as exc:
            click.echo(f"error: {exc}", err=True)
            code = 1
        sys.exit(code)

    return wrapper


@click.group()
@click.version_option(version=__version__)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Clinical information extraction harness."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _adapter(id_field, text_field, gold_field) -> FieldAdapter:
    overrides = {}
    if id_field:
        overrides["id_fields"] = (id_field,)
    if text_field:
        overrides["text_fields"] = (text_field,)
    if gold_field:
        overrides["gold_fields"] = (gold_field,)
    return FieldAdapter(**overrides) if overrides else FieldAdapter()


corpus_option = click.option("--corpus", "corpus_path", required=True, type=click.Path(path_type=Path))
language_option = click.option("--language", default="en", show_default=True,
                               help="Language tag to ingest; 'all' disables filtering.")


@main.command()
@corpus_option
@click.option("--format", "fmt", default="auto", type=click.Choice(["auto", "jsonl", "array"]), show_default=True)
@language_option
@click.option("--id-field", default=None, help="Exact record field holding the sample id.")
@click.option("--text-field", default=None, help="Exact record field holding the report text.")
@click.option("--gold-field", default=None, help="Exact record field holding the gold structure.")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@guarded
def ingest(corpus_path, fmt, language, id_field, text_field, gold_field, out_path):
    """Normalize a corpus file into the canonical line-delimited layout."""
    result = load_corpus(
        corpus_path,
        fmt=fmt,
        adapter=_adapter(id_field, text_field, gold_field),
        language=None if language == "all" else language,
    )
    dump_corpus(result.corpus, out_path)
    click.echo(
        f"ingested {len(result.corpus)} samples -> {out_path} "
        f"({len(result.rejected)} rejected, {result.skipped_language} other-language)"
    )
    for rejected in result.rejected[:20]:
        click.echo(f"  rejected record {rejected.index}: {rejected.reason}", err=True)
    return 1 if result.rejected else 0


@main.command()
@corpus_option
@language_option
@click.option("--json", "as_json", is_flag=True, help="Emit machine-readable records.")
@guarded
def stats(corpus_path, language, as_json):
    """Per-category presence statistics of a corpus."""
    result = load_corpus(corpus_path, language=None if language == "all" else language)
    table = presence_stats(result.corpus)
    if as_json:
        click.echo(json.dumps(table.to_records(), indent=2))
    else:
        click.echo(render_presence_table(table))


@main.command()
@corpus_option
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--embedder-dim", default=256, show_default=True)
@click.option("--sidecar-url", default=None, help="Use the sidecar embedding service instead of the built-in embedder.")
@guarded
def index(corpus_path, out_path, embedder_dim, sidecar_url):
    """Build and persist an embedding index over a corpus."""
    config = {"kind": "sidecar", "base_url": sidecar_url} if sidecar_url else {"kind": "hashing", "dim": embedder_dim}
    embedder = sentence_embedder_from_config(config)
    corpus = load_corpus(corpus_path).corpus
    built = build_index(corpus, embedder)
    save_index(built, out_path)
    click.echo(f"indexed {len(built)} reports (dim {built.dim}, embedder {built.embedder_id}) -> {out_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--mode", default=None, help="Override the config's mode.")
@click.option("--seed", default=None, type=int, help="Override the config's seed.")
@click.option("--limit", "eval_limit", default=None, type=int, help="Cap the number of evaluated samples.")
@guarded
def run(config_path, mode, seed, eval_limit):
    """Run one experiment end to end from a JSON configuration file."""
    import dataclasses

    config = load_config(config_path)
    overrides = {}
    if mode is not None:
        overrides["mode"] = mode
    if seed is not None:
        overrides["seed"] = seed
    if eval_limit is not None:
        overrides["eval_limit"] = eval_limit
    if overrides:
        config = dataclasses.replace(config, **overrides)
    outputs = run_experiment(config)
    click.echo(f"results:  {outputs.results_path}")
    click.echo(f"report:   {outputs.report_json_path}")
    click.echo(f"manifest: {outputs.manifest_path}")
    click.echo(outputs.report_text_path.read_text(encoding="utf-8"))
    if outputs.failed_samples:
        click.echo(f"{outputs.failed_samples} samples failed", err=True)
        return 1
    return 0


@main.command()
@click.option("--results", "results_path", required=True, type=click.Path(path_type=Path))
@corpus_option
@click.option("--out-dir", required=True, type=click.Path(path_type=Path))
@click.option("--with-bert/--no-bert", default=True, show_default=True)
@click.option("--with-entities/--no-entities", default=True, show_default=True)
@click.option("--sidecar-url", default=None, help="Score with the sidecar service instead of built-in clients.")
@guarded
def evaluate(results_path, corpus_path, out_dir, with_bert, with_entities, sidecar_url):
    """Re-score persisted extraction results against a gold corpus."""
    results = read_results(results_path)
    corpus = load_corpus(corpus_path, language=None).corpus
    gold_by_id = {s.id: s.gold for s in corpus}
    missing = [r.sample_id for r in results if r.sample_id not in gold_by_id]
    if missing:
        raise EmptyInput(f"{len(missing)} result samples missing from the corpus (first: {missing[0]})")
    token_embedder = None
    recognizer = None
    if with_bert:
        config = {"kind": "sidecar", "base_url": sidecar_url} if sidecar_url else {"kind": "hashing", "dim": 64}
        token_embedder = token_embedder_from_config(config)
    if with_entities:
        config = {"kind": "sidecar", "base_url": sidecar_url} if sidecar_url else {"kind": "lexicon"}
        recognizer = entity_recognizer_from_config(config)
    scored = score_results(results, gold_by_id, token_embedder, recognizer)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores(scored, out_dir / "scores.jsonl")
    report = aggregate(
        [scores for _, scores in scored],
        metadata={
            "model": results[0].mode if results else "?",
            "mode": results[0].mode if results else "?",
            "token_embedder": getattr(token_embedder, "embedder_id", None),
            "entity_recognizer": getattr(recognizer, "model_id", None),
        },
    )
    (out_dir / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    from clinex.experiment import render_category_table

    click.echo(render_category_table(report))


@main.command("analyze-errors")
@click.option("--results", "results_path", required=True, type=click.Path(path_type=Path))
@corpus_option
@click.option("--prompt-log", "prompt_log_path", default=None, type=click.Path(path_type=Path),
              help="Batch prompt log; enables the in-context-copy check.")
@click.option("-n", "sample_n", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", default=None, type=click.Path(path_type=Path))
@guarded
def analyze_errors(results_path, corpus_path, prompt_log_path, sample_n, seed, out_path):
    """Sample error-bearing predictions and classify their disagreements."""
    results = read_results(results_path)
    corpus = load_corpus(corpus_path, language=None).corpus
    gold_by_id = {s.id: s.gold for s in corpus}
    pairs = [(r, gold_by_id[r.sample_id]) for r in results if r.sample_id in gold_by_id]
    icl = load_prompt_log(prompt_log_path) if prompt_log_path else None
    bundle = sample_errors(pairs, n=sample_n, seed=seed, icl_concepts_by_sample=icl)
    if out_path:
        write_review_bundle(bundle, out_path)
        click.echo(f"review bundle -> {out_path}")
    click.echo(render_error_digest(bundle))


@main.command()
@click.option("--summaries", "summaries_path", required=True, type=click.Path(path_type=Path),
              help="JSONL of raw reports (id + text) to annotate.")
@click.option("--seed-examples", "seeds_path", required=True, type=click.Path(path_type=Path),
              help="Small annotated corpus used as fixed in-context examples.")
@click.option("--endpoint-url", required=True)
@click.option("--model", "model_name", required=True)
@click.option("--auth-env", default=None)
@click.option("--definitions", "definitions_source", default="en-v1", show_default=True)
@click.option("--concurrency", default=4, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(path_type=Path))
@guarded
def generate(summaries_path, seeds_path, endpoint_url, model_name, auth_env,
             definitions_source, concurrency, out_dir):
    """Annotate raw summaries with a teacher model; quarantine bad outputs."""
    summaries = load_reports(summaries_path, language=None)
    seed_corpus = load_corpus(seeds_path, language=None).corpus
    job = AnnotationJob(
        summaries=tuple(summaries),
        teacher=ModelEndpoint(base_url=endpoint_url, model_name=model_name, auth_env=auth_env),
        seed_examples=tuple((s.report, s.gold) for s in seed_corpus),
        definitions=load_definitions(definitions_source),
    )
    annotated, quarantine = generate_annotations(job, limit=concurrency)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_corpus(annotated, out_dir / "annotated.jsonl")
    write_quarantine(quarantine, out_dir / "quarantine.jsonl")
    click.echo(f"accepted {len(annotated)} -> {out_dir / 'annotated.jsonl'}")
    click.echo(f"quarantined {len(quarantine)} -> {out_dir / 'quarantine.jsonl'}")
    return 1 if quarantine else 0


@main.command()
@click.argument("report_paths", nargs=-1, type=click.Path(path_type=Path))
@click.option("--markdown", is_flag=True, help="Emit a markdown table instead of plain text.")
@guarded
def report(report_paths, markdown):
    """Render one or more aggregate reports side by side."""
    click.echo(render_report(list(report_paths), markdown=markdown))


@main.command("dump-prompt")
@corpus_option
@click.option("--id", "sample_id", required=True)
@click.option("--mode", default="naive", type=click.Choice(["naive", "advanced", "minimal"]), show_default=True)
@click.option("--m", "retrieval_m", default=3, show_default=True)
@click.option("--definitions", "definitions_source", default="en-v1", show_default=True)
@guarded
def dump_prompt(corpus_path, sample_id, mode, retrieval_m, definitions_source):
    """Render the prompt a sample would receive, for audit.

    Advanced mode retrieves in-context examples from the rest of the same
    corpus with the built-in embedder.
    """
    corpus = load_corpus(corpus_path, language=None).corpus
    by_id = corpus.by_id()
    if sample_id not in by_id:
        raise EmptyInput(f"sample {sample_id!r} not in corpus")
    sample = by_id[sample_id]
    deps = None
    if mode == "advanced":
        from clinex.corpus import Corpus

        rest = Corpus(tuple(s for s in corpus if s.id != sample_id))
        embedder = sentence_embedder_from_config({"kind": "hashing", "dim": 256})
        deps = PromptDeps(
            definitions=load_definitions(definitions_source),
            index=build_index(rest, embedder),
            embedder=embedder,
            train=rest.by_id(),
            m=retrieval_m,
        )
    from clinex.inference import build_prompt

    prompt, _ = build_prompt(sample.report, mode, deps)
    click.echo(f"# mode: {prompt.mode}   hash: {prompt.content_hash}")
    click.echo(f"# system: {prompt.system_text}")
    click.echo(prompt.user_text)


@main.command("validation-sheet")
@corpus_option
@click.option("--per-category-n", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@guarded
def validation_sheet(corpus_path, per_category_n, seed, out_path):
    """Draw the stratified per-category sheet for manual validation."""
    corpus = load_corpus(corpus_path, language=None).corpus
    rows = draw_validation_sample(corpus, per_category_n=per_category_n, seed=seed)
    write_sheet(rows, out_path)
    click.echo(f"{len(rows)} rows -> {out_path}")


@main.command("error-rates")
@click.option("--sheet", "sheet_path", required=True, type=click.Path(path_type=Path))
@guarded
def error_rates(sheet_path):
    """Per-category error rates from a judged validation sheet."""
    rows = read_sheet(sheet_path)
    click.echo(render_error_rate_table(estimate_error_rates(rows)))


@main.command("export-finetune")
@corpus_option
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@guarded
def export_finetune(corpus_path, out_path):
    """Export (minimal prompt, canonical gold) pairs for adapter training.

    The emitted instruction is byte-identical to what build_minimal_prompt
    serves at inference time; the manifest carries the template hash so
    the training side can verify it.
    """
    corpus = load_corpus(corpus_path, language=None).corpus
    out_path = Path(out_path)
    with out_path.open("w", encoding="utf-8") as handle:
        for sample in corpus:
            record = {
                "id": sample.id,
                "system": SYSTEM_TEXT,
                "prompt": render_minimal_user_text(sample.report.text),
                "completion": serialize_report(sample.gold),
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    manifest = {
        "pairs": len(corpus),
        "minimal_template_sha256": minimal_template_hash(),
        "system_text": SYSTEM_TEXT,
    }
    manifest_path = out_path.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"{len(corpus)} pairs -> {out_path} (manifest {manifest_path})")


if __name__ == "__main__":
    main()
