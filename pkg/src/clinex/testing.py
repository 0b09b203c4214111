"""Deterministic test doubles: a scripted chat endpoint and synthetic data.

The mock server speaks the same chat-completion wire format the
inference module sends, so end-to-end runs exercise real HTTP, retries
and concurrency against fully scripted behavior.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

from clinex.corpus import Corpus, CorpusSample
from clinex.schema import (
    Category,
    ClinicalReport,
    StructuredReport,
    serialize_report,
)

# Behavior: (request_index, user_text) -> (http_status, completion_or_error_text)
Behavior = Callable[[int, str], tuple[int, str]]


class MockChatServer:
    """In-process chat-completions endpoint with scripted behavior.

    Tracks request count and the high-water mark of concurrently open
    requests so tests can assert the batch runner's concurrency bound.
    """

    def __init__(self, behavior: Behavior, latency_for: Callable[[int], float] | None = None):
        self.behavior = behavior
        self.latency_for = latency_for
        self.request_count = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # silence request logging
                pass

            def do_POST(self):
                with mock._lock:
                    index = mock.request_count
                    mock.request_count += 1
                    mock.in_flight += 1
                    mock.max_in_flight = max(mock.max_in_flight, mock.in_flight)
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length))
                    user_text = body["messages"][-1]["content"]
                    if mock.latency_for is not None:
                        time.sleep(mock.latency_for(index))
                    status, text = mock.behavior(index, user_text)
                    if status == 200:
                        payload = {"choices": [{"message": {"role": "assistant", "content": text}}]}
                    else:
                        payload = {"error": {"message": text}}
                    encoded = json.dumps(payload).encode("utf-8")
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(encoded)))
                    self.end_headers()
                    self.wfile.write(encoded)
                finally:
                    with mock._lock:
                        mock.in_flight -= 1

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/chat/completions"

    def __enter__(self) -> "MockChatServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def compliant_behavior(corpus: Corpus, drop: Category | None = None) -> Behavior:
    """Echo the gold annotation of whichever known report the prompt asks about.

    The query report is the last report text occurring in the prompt
    (in-context examples precede it), matched verbatim.  With drop set,
    that category is omitted from every answer.
    """
    samples = list(corpus)

    def behavior(_index: int, user_text: str) -> tuple[int, str]:
        best: tuple[int, CorpusSample] | None = None
        for sample in samples:
            position = user_text.rfind(sample.report.text)
            if position >= 0 and (best is None or position > best[0]):
                best = (position, sample)
        if best is None:
            return 200, "I cannot find that report."
        gold = best[1].gold
        if drop is not None and drop in gold:
            gold = StructuredReport.build(
                {c: gold.get(c) for c in gold.categories if c is not drop}
            )
        return 200, serialize_report(gold)

    return behavior


def flaky_behavior(inner: Behavior, fail_statuses: Sequence[int]) -> Behavior:
    """Fail the first len(fail_statuses) requests with those codes, then delegate."""

    def behavior(index: int, user_text: str) -> tuple[int, str]:
        if index < len(fail_statuses):
            return fail_statuses[index], "scripted failure"
        return inner(index, user_text)

    return behavior


def always_failing_behavior(status: int) -> Behavior:
    def behavior(_index: int, _user_text: str) -> tuple[int, str]:
        return status, "scripted failure"

    return behavior


def fixed_behavior(text: str) -> Behavior:
    def behavior(_index: int, _user_text: str) -> tuple[int, str]:
        return 200, text

    return behavior


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_AGES = ("34", "45", "52", "61", "27", "73", "58", "39")
_GENDERS = ("male", "female")
_SYMPTOMS = ("chest pain", "dyspnea", "fever", "fatigue", "cough", "headache")
_DIAGNOSES = (
    "myocardial infarction",
    "pneumonia",
    "sepsis",
    "pulmonary embolism",
    "atrial fibrillation",
    "heart failure",
)
_COMORBIDITIES = ("hypertension", "type 2 diabetes", "asthma", "obesity", "hyperlipidemia")
_DRUGS = ("aspirin", "heparin", "metformin", "ceftriaxone", "furosemide", "warfarin")
_PROCEDURES = ("chest radiograph", "computed tomography", "echocardiography", "colonoscopy")
_LABS = ("elevated troponin", "leukocytosis", "elevated creatinine", "low hemoglobin")
_INTERVENTIONS = ("coronary angioplasty", "appendectomy", "thoracentesis")
_PATHOLOGY = ("adenocarcinoma on biopsy", "granulomatous inflammation")
_OUTCOMES = ("discharged in stable condition", "full recovery at follow-up", "died in hospital")
_LIFE_STYLE = ("smoker of 20 pack-years", "drinks alcohol socially", "sedentary life")
_FAMILY = ("father with lung cancer", "mother with type 2 diabetes")
_SOCIAL = ("lives alone", "works as a teacher", "retired engineer")
_HISTORY = ("appendectomy in childhood", "cholecystectomy", "prior stroke")


def synthetic_sample(i: int) -> CorpusSample:
    """Deterministic synthetic sample; low-index fields cycle so every
    category appears somewhere in any corpus of a few dozen samples."""
    age = _AGES[i % len(_AGES)]
    gender = _GENDERS[i % len(_GENDERS)]
    symptom = _SYMPTOMS[i % len(_SYMPTOMS)]
    diagnosis = _DIAGNOSES[i % len(_DIAGNOSES)]
    drug = _DRUGS[i % len(_DRUGS)]
    gold: dict[str, str] = {
        "age": age,
        "gender": gender,
        "signs_symptoms": symptom,
        "diagnosis": diagnosis,
        "pharmacological_therapy": drug,
    }
    text = (
        f"Case {i}: A {age}-year-old {gender} presented with {symptom}. "
        f"The working diagnosis was {diagnosis}, treated with {drug}."
    )
    extras = (
        ("comorbidities", _COMORBIDITIES, "Known history of {}."),
        ("diagnostic_procedures", _PROCEDURES, "Workup included {}."),
        ("laboratory_values", _LABS, "Laboratory testing showed {}."),
        ("interventional_therapy", _INTERVENTIONS, "The patient underwent {}."),
        ("pathology", _PATHOLOGY, "Tissue examination revealed {}."),
        ("patient_outcome_assessment", _OUTCOMES, "The patient was {}."),
        ("life_style", _LIFE_STYLE, "The patient was a {}."),
        ("family_history", _FAMILY, "Family history: {}."),
        ("social_history", _SOCIAL, "Social circumstances: {}."),
        ("medical_surgical_history", _HISTORY, "Past history of {}."),
    )
    for offset, (category, pool, sentence) in enumerate(extras):
        if (i + offset) % 3 == 0:  # roughly a third of samples carry each extra
            value = pool[i % len(pool)]
            gold[category] = value
            text += " " + sentence.format(value)
    return CorpusSample(
        report=ClinicalReport(id=f"syn-{i:04d}", text=text),
        gold=StructuredReport.build(gold),
        source_id="synthetic",
    )


def synthetic_corpus(n: int) -> Corpus:
    return Corpus(tuple(synthetic_sample(i) for i in range(n)))
