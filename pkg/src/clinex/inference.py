"""Chat-completion endpoint driver with retries and a bounded batch runner.

One wire format: POST a JSON body {model, messages, temperature,
max_tokens} and read the first choice's message content.  Transient
failures (timeouts, 429, 5xx) retry with exponential backoff and full
jitter; auth failures abort immediately.  The batch runner owns all
parallelism and returns results in input order no matter how requests
complete.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import requests

from clinex.corpus import CorpusSample
from clinex.prompting import (
    DefinitionSet,
    PromptSpec,
    build_advanced_prompt,
    build_minimal_prompt,
    build_naive_prompt,
)
from clinex.retrieval import DEFAULT_M, EmbeddingIndex, retrieve_for_text
from clinex.schema import ClinicalReport, ParseFailure, StructuredReport, parse_model_output

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class InferenceError(Exception):
    pass


class TransportError(InferenceError):
    """Request could not be completed within the retry budget."""


class AuthError(InferenceError):
    """Credentials missing or rejected; never retried."""


class MalformedServerResponse(InferenceError):
    """Server replied 200 but not in the chat-completion shape."""


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5  # seconds; attempt k sleeps U(0, base * 2^(k-1))

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff < 0:
            raise ValueError("base_backoff must be >= 0")


@dataclass(frozen=True)
class ModelEndpoint:
    """A served chat-completion model: URL, decoding, auth, and retries.

    base_url is the full URL the request is POSTed to.  auth_env names an
    environment variable holding the bearer token; None means the
    endpoint is unauthenticated.
    """

    base_url: str
    model_name: str
    decoding: Decoding = Decoding()
    auth_env: str | None = None
    retry: RetryPolicy = RetryPolicy()
    timeout: float = 120.0


def auth_headers(endpoint: ModelEndpoint) -> dict[str, str]:
    """Resolve credentials; raises AuthError before any request is sent."""
    if endpoint.auth_env is None:
        return {}
    token = os.environ.get(endpoint.auth_env)
    if not token:
        raise AuthError(f"environment variable {endpoint.auth_env!r} is not set")
    return {"Authorization": f"Bearer {token}"}


def _request_payload(endpoint: ModelEndpoint, prompt: PromptSpec) -> dict:
    return {
        "model": endpoint.model_name,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": prompt.user_text},
        ],
        "temperature": endpoint.decoding.temperature,
        "max_tokens": endpoint.decoding.max_output_tokens,
    }


def _extract_content(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedServerResponse(f"no message content in response: {exc}") from exc
    if not isinstance(content, str):
        raise MalformedServerResponse(f"message content is {type(content).__name__}, expected str")
    return content


def _complete_with_stats(
    endpoint: ModelEndpoint,
    prompt: PromptSpec,
    session: requests.Session | None = None,
) -> tuple[str, int, float]:
    """Send the prompt; returns (completion text, attempts used, latency seconds)."""
    headers = auth_headers(endpoint)
    payload = _request_payload(endpoint, prompt)
    log.debug("request to %s: %s", endpoint.base_url, json.dumps(payload)[:2000])
    owns_session = session is None
    session = session or requests.Session()
    started = time.monotonic()
    last_problem = "no attempt made"
    try:
        for attempt in range(1, endpoint.retry.max_attempts + 1):
            try:
                response = session.post(
                    endpoint.base_url, json=payload, headers=headers, timeout=endpoint.timeout
                )
            except requests.RequestException as exc:
                last_problem = f"transport failure: {exc}"
            else:
                if response.status_code == 200:
                    content = _extract_content(response.json())
                    log.debug("response (%d attempts): %s", attempt, content[:2000])
                    return content, attempt, time.monotonic() - started
                if response.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({response.status_code})")
                last_problem = f"status {response.status_code}"
                if response.status_code not in RETRYABLE_STATUS:
                    raise TransportError(
                        f"non-retryable response after {attempt} attempt(s): {last_problem}"
                    )
            if attempt < endpoint.retry.max_attempts:
                delay = random.uniform(0, endpoint.retry.base_backoff * 2 ** (attempt - 1))
                time.sleep(delay)
        raise TransportError(
            f"retry budget exhausted after {endpoint.retry.max_attempts} attempt(s); last: {last_problem}"
        )
    finally:
        if owns_session:
            session.close()


def complete(
    endpoint: ModelEndpoint, prompt: PromptSpec, session: requests.Session | None = None
) -> str:
    """The raw completion text for one prompt."""
    text, _, _ = _complete_with_stats(endpoint, prompt, session)
    return text


@dataclass(frozen=True)
class PromptDeps:
    """Prompt-building dependencies; advanced mode needs all of them."""

    definitions: DefinitionSet | None = None
    index: EmbeddingIndex | None = None
    embedder: object | None = None  # SentenceEmbedder
    train: Mapping[str, CorpusSample] | None = None
    m: int = DEFAULT_M

    def require_advanced(self) -> None:
        missing = [
            name
            for name, value in (
                ("definitions", self.definitions),
                ("index", self.index),
                ("embedder", self.embedder),
                ("train", self.train),
            )
            if value is None
        ]
        if missing:
            raise ValueError(f"advanced mode requires {', '.join(missing)}")


@dataclass(frozen=True)
class ExtractionResult:
    """Outcome of one extraction call, failure or not.

    Exactly one of parsed/failure_kind is set; a parse failure keeps the
    raw completion for the error-analysis audit trail, and a transport
    failure records why no completion exists.
    """

    sample_id: str
    mode: str
    raw_completion: str | None
    parsed: StructuredReport | None
    failure_kind: str | None  # None | "parse:<kind>" | "transport"
    failure_message: str | None
    attempts: int
    prompt_hash: str
    latency: float = 0.0

    @property
    def ok(self) -> bool:
        return self.parsed is not None

    def to_record(self) -> dict:
        """Stable persistence record; excludes wall-clock latency so
        reruns against a deterministic endpoint are byte-identical."""
        return {
            "sample_id": self.sample_id,
            "mode": self.mode,
            "raw_completion": self.raw_completion,
            "parsed": self.parsed.as_dict() if self.parsed is not None else None,
            "failure_kind": self.failure_kind,
            "failure_message": self.failure_message,
            "attempts": self.attempts,
            "prompt_hash": self.prompt_hash,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "ExtractionResult":
        parsed = record.get("parsed")
        return cls(
            sample_id=record["sample_id"],
            mode=record["mode"],
            raw_completion=record.get("raw_completion"),
            parsed=StructuredReport.build(parsed) if parsed is not None else None,
            failure_kind=record.get("failure_kind"),
            failure_message=record.get("failure_message"),
            attempts=record.get("attempts", 1),
            prompt_hash=record.get("prompt_hash", ""),
        )


def build_prompt(report: ClinicalReport, mode: str, deps: PromptDeps | None) -> tuple[PromptSpec, tuple[str, ...]]:
    """Render the prompt for a mode; returns (prompt, in-context concepts).

    The concept list is every concept appearing in the prompt's in-context
    examples, kept for the hallucination-source check in error analysis.
    """
    if mode == "naive":
        return build_naive_prompt(report), ()
    if mode == "minimal":
        return build_minimal_prompt(report), ()
    if mode == "advanced":
        deps = deps or PromptDeps()
        deps.require_advanced()
        ranked = retrieve_for_text(deps.index, report.text, deps.embedder, deps.m)
        examples = []
        concepts: list[str] = []
        for sample_id, _sim in ranked:
            sample = deps.train[sample_id]
            examples.append((sample.report, sample.gold))
            for _category, values in sample.gold:
                concepts.extend(values)
        return build_advanced_prompt(report, examples, deps.definitions), tuple(concepts)
    raise ValueError(f"unknown mode {mode!r}")


def _run_single(
    endpoint: ModelEndpoint,
    report: ClinicalReport,
    mode: str,
    deps: PromptDeps | None,
    session: requests.Session | None,
) -> tuple[ExtractionResult, dict]:
    prompt, icl_concepts = build_prompt(report, mode, deps)
    prompt_record = {
        "sample_id": report.id,
        "mode": mode,
        "prompt_hash": prompt.content_hash,
        "system": prompt.system_text,
        "user": prompt.user_text,
        "icl_concepts": list(icl_concepts),
    }
    try:
        text, attempts, latency = _complete_with_stats(endpoint, prompt, session)
    except TransportError as exc:
        result = ExtractionResult(
            sample_id=report.id,
            mode=mode,
            raw_completion=None,
            parsed=None,
            failure_kind="transport",
            failure_message=str(exc),
            attempts=endpoint.retry.max_attempts,
            prompt_hash=prompt.content_hash,
        )
        return result, prompt_record
    try:
        parsed: StructuredReport | None = parse_model_output(text, mode="lenient")
        failure_kind = failure_message = None
    except ParseFailure as exc:
        parsed = None
        failure_kind = f"parse:{exc.kind}"
        failure_message = str(exc)
    result = ExtractionResult(
        sample_id=report.id,
        mode=mode,
        raw_completion=text,
        parsed=parsed,
        failure_kind=failure_kind,
        failure_message=failure_message,
        attempts=attempts,
        prompt_hash=prompt.content_hash,
        latency=latency,
    )
    return result, prompt_record


def extract_one(
    endpoint: ModelEndpoint,
    report: ClinicalReport,
    mode: str,
    deps: PromptDeps | None = None,
    session: requests.Session | None = None,
) -> ExtractionResult:
    """Prompt, call, and leniently parse one report.

    Parse problems come back inside the result; only transport-budget
    exhaustion and auth failures raise.
    """
    result, _ = _run_single(endpoint, report, mode, deps, session)
    if result.failure_kind == "transport":
        raise TransportError(result.failure_message)
    return result


@dataclass(frozen=True)
class CompletionOutcome:
    """Raw outcome of one prompt in a custom-prompt batch."""

    id: str
    text: str | None
    attempts: int
    error: str | None = None  # transport failure message


def complete_many(
    endpoint: ModelEndpoint,
    prompts: Sequence[tuple[str, PromptSpec]],
    limit: int = 4,
) -> list[CompletionOutcome]:
    """Send pre-built prompts with at most `limit` in flight.

    Transport failures are recorded per prompt; AuthError aborts.  Output
    order equals input order.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    auth_headers(endpoint)
    outcomes: dict[str, CompletionOutcome] = {}
    lock = threading.Lock()
    abort = threading.Event()
    auth_failure: list[AuthError] = []
    thread_session = threading.local()

    def work(item: tuple[str, PromptSpec]) -> None:
        prompt_id, prompt = item
        if abort.is_set():
            return
        if not hasattr(thread_session, "session"):
            thread_session.session = requests.Session()
        try:
            text, attempts, _ = _complete_with_stats(endpoint, prompt, thread_session.session)
            outcome = CompletionOutcome(prompt_id, text, attempts)
        except TransportError as exc:
            outcome = CompletionOutcome(prompt_id, None, endpoint.retry.max_attempts, str(exc))
        except AuthError as exc:
            abort.set()
            with lock:
                auth_failure.append(exc)
            return
        with lock:
            outcomes[prompt_id] = outcome

    with ThreadPoolExecutor(max_workers=limit) as executor:
        list(executor.map(work, prompts))
    if auth_failure:
        raise auth_failure[0]
    return [outcomes[prompt_id] for prompt_id, _ in prompts]


def _load_journal(path: Path) -> dict[str, ExtractionResult]:
    done: dict[str, ExtractionResult] = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            result = ExtractionResult.from_record(json.loads(line))
            done[result.sample_id] = result
    return done


def run_batch(
    endpoint: ModelEndpoint,
    reports: Sequence[ClinicalReport],
    mode: str,
    deps: PromptDeps | None = None,
    limit: int = 4,
    journal_path: str | Path | None = None,
    prompt_log_path: str | Path | None = None,
) -> list[ExtractionResult]:
    """Extract a batch with at most `limit` requests in flight.

    Output order equals input order.  Per-sample failures (transport
    budget or parse) become results; only AuthError aborts the batch.
    When journal_path is set, finished samples are appended as they
    complete and an interrupted run resumes where it stopped.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if mode == "advanced":
        (deps or PromptDeps()).require_advanced()
    auth_headers(endpoint)  # fail fast before any request

    journal = Path(journal_path) if journal_path else None
    done = _load_journal(journal) if journal else {}
    pending = [report for report in reports if report.id not in done]

    results: dict[str, ExtractionResult] = dict(done)
    write_lock = threading.Lock()
    abort = threading.Event()
    auth_failure: list[AuthError] = []
    thread_session = threading.local()

    journal_handle = journal.open("a", encoding="utf-8") if journal else None
    prompt_log_handle = (
        Path(prompt_log_path).open("a", encoding="utf-8") if prompt_log_path else None
    )

    def work(report: ClinicalReport) -> None:
        if abort.is_set():
            return
        if not hasattr(thread_session, "session"):
            thread_session.session = requests.Session()
        try:
            result, prompt_record = _run_single(endpoint, report, mode, deps, thread_session.session)
        except AuthError as exc:
            abort.set()
            with write_lock:
                auth_failure.append(exc)
            return
        with write_lock:
            results[report.id] = result
            if journal_handle:
                journal_handle.write(json.dumps(result.to_record(), ensure_ascii=False) + "\n")
                journal_handle.flush()
            if prompt_log_handle:
                prompt_log_handle.write(json.dumps(prompt_record, ensure_ascii=False) + "\n")
                prompt_log_handle.flush()

    try:
        with ThreadPoolExecutor(max_workers=limit) as executor:
            list(executor.map(work, pending))
    finally:
        if journal_handle:
            journal_handle.close()
        if prompt_log_handle:
            prompt_log_handle.close()

    if auth_failure:
        raise auth_failure[0]
    missing = [report.id for report in reports if report.id not in results]
    if missing:  # only reachable via abort racing the queue
        raise InferenceError(f"batch incomplete: {len(missing)} samples never ran")
    return [results[report.id] for report in reports]


def write_results(results: Sequence[ExtractionResult], path: str | Path) -> None:
    """Persist results as line-delimited records keyed by sample_id."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(result.to_record(), ensure_ascii=False) + "\n")


def read_results(path: str | Path) -> list[ExtractionResult]:
    results = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            results.append(ExtractionResult.from_record(json.loads(line)))
    return results


def load_prompt_log(path: str | Path) -> dict[str, list[str]]:
    """sample_id → in-context example concepts, from a batch prompt log."""
    concepts: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            record = json.loads(line)
            concepts[record["sample_id"]] = list(record.get("icl_concepts", []))
    return concepts
