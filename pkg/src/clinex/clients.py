"""Embedding and entity-recognition clients.

Three client roles feed the harness: sentence embeddings for retrieval,
token embeddings for similarity scoring, and NER for entity metrics.
Each role has a deterministic in-process implementation (no model
downloads, reproducible across machines) and an HTTP client for the
model sidecar service, selected by configuration.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import requests

from clinex.metrics import tokenize

log = logging.getLogger(__name__)


@runtime_checkable
class SentenceEmbedder(Protocol):
    embedder_id: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class TokenEmbedder(Protocol):
    embedder_id: str

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]: ...


@runtime_checkable
class EntityRecognizer(Protocol):
    model_id: str

    def entities(self, text: str) -> list[tuple[str, str]]: ...


class ClientError(Exception):
    """A model service call failed."""


def _stable_seed(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")


class HashingSentenceEmbedder:
    """Feature-hashing bag-of-ngrams sentence embedder.

    Tokens and token bigrams hash (sha256) to signed buckets; the bucket
    sums are L2-normalized.  Deterministic per (embedder_id, text) across
    processes and platforms, which is what index reproducibility needs.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.embedder_id = f"hashing-sent-{dim}-v1"

    def _features(self, text: str) -> list[str]:
        tokens = tokenize(text)
        return tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        for feature in self._features(text):
            digest = hashlib.sha256(feature.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            vector[bucket] += sign
        norm = np.linalg.norm(vector)
        if norm > 0:
            vector /= norm
        return vector.astype(np.float32)


class HashingTokenEmbedder:
    """Per-token pseudo-embeddings from a token-seeded RNG.

    Identical tokens map to identical unit rows; distinct tokens land on
    nearly orthogonal directions.  A static stand-in for a contextual
    encoder, adequate for exercising the greedy-matching metric.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.embedder_id = f"hashing-tok-{dim}-v1"
        self._cache: dict[str, np.ndarray] = {}

    def _row(self, token: str) -> np.ndarray:
        row = self._cache.get(token)
        if row is None:
            rng = np.random.default_rng(_stable_seed(token))
            row = rng.standard_normal(self.dim)
            row /= np.linalg.norm(row)
            self._cache[token] = row
        return row

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        tokens = tokenize(text)
        if not tokens:
            return [], np.empty((0, self.dim), dtype=np.float64)
        return tokens, np.stack([self._row(t) for t in tokens])


# Compact clinical term lexicon for the in-process recognizer: enough
# coverage for synthetic corpora, demos and tests.  The sidecar service
# is the richer NER backend for real runs.
MEDICATION_TERMS = (
    "aspirin", "warfarin", "ibuprofen", "metformin", "insulin", "heparin",
    "amoxicillin", "azithromycin", "ceftriaxone", "vancomycin", "meropenem",
    "prednisone", "dexamethasone", "hydrocortisone", "furosemide",
    "lisinopril", "amlodipine", "metoprolol", "atenolol", "losartan",
    "atorvastatin", "simvastatin", "omeprazole", "pantoprazole",
    "paracetamol", "acetaminophen", "morphine", "fentanyl", "oxycodone",
    "cisplatin", "doxorubicin", "rituximab", "tamoxifen", "methotrexate",
    "levothyroxine", "salbutamol", "albuterol", "clopidogrel", "apixaban",
    "enoxaparin", "gentamicin", "ciprofloxacin", "norepinephrine",
)
DIAGNOSIS_TERMS = (
    "hypertension", "diabetes", "sepsis", "pneumonia", "asthma", "copd",
    "anemia", "leukemia", "lymphoma", "melanoma", "carcinoma", "sarcoma",
    "stroke", "epilepsy", "migraine", "arthritis", "osteoporosis",
    "hepatitis", "cirrhosis", "pancreatitis", "appendicitis", "cholecystitis",
    "meningitis", "endocarditis", "myocarditis", "pericarditis",
    "tuberculosis", "influenza", "covid", "bronchitis", "nephritis",
    "hypothyroidism", "hyperthyroidism", "obesity", "depression", "anxiety",
    "schizophrenia", "dementia", "parkinson", "alzheimer", "fibrillation",
    "thrombosis", "embolism", "aneurysm", "ischemia", "infarction",
    "hyperlipidemia", "hyperglycemia", "hypoglycemia", "hyponatremia",
    "hyperkalemia", "ards", "dyspnea", "tachycardia", "bradycardia",
)
MULTIWORD_TERMS = (
    ("myocardial infarction", "diagnosis"),
    ("heart failure", "diagnosis"),
    ("atrial fibrillation", "diagnosis"),
    ("pulmonary embolism", "diagnosis"),
    ("deep vein thrombosis", "diagnosis"),
    ("type 2 diabetes", "diagnosis"),
    ("type 1 diabetes", "diagnosis"),
    ("chronic kidney disease", "diagnosis"),
    ("breast cancer", "diagnosis"),
    ("lung cancer", "diagnosis"),
    ("rheumatoid arthritis", "diagnosis"),
)


class LexiconEntityRecognizer:
    """Longest-match lexicon scanner over the token stream.

    Matches the curated medication and diagnosis terms, preferring the
    longest span at each position.  Labels are "medication" and
    "diagnosis".
    """

    model_id = "lexicon-ner-v1"

    def __init__(self) -> None:
        self._by_tokens: dict[tuple[str, ...], str] = {}
        for term, label in MULTIWORD_TERMS:
            self._by_tokens[tuple(tokenize(term))] = label
        for term in MEDICATION_TERMS:
            self._by_tokens[(term,)] = "medication"
        for term in DIAGNOSIS_TERMS:
            self._by_tokens[(term,)] = "diagnosis"
        self._max_len = max(len(k) for k in self._by_tokens)

    def entities(self, text: str) -> list[tuple[str, str]]:
        tokens = tokenize(text)
        found: list[tuple[str, str]] = []
        i = 0
        while i < len(tokens):
            match = None
            for span in range(min(self._max_len, len(tokens) - i), 0, -1):
                candidate = tuple(tokens[i : i + span])
                label = self._by_tokens.get(candidate)
                if label is not None:
                    match = (" ".join(candidate), label, span)
                    break
            if match is not None:
                found.append((match[0], match[1]))
                i += match[2]
            else:
                i += 1
        return found


@dataclass
class SidecarClient:
    """HTTP client for the model sidecar's embedding and NER endpoints.

    Wire: POST /embed_sentence {"text"} → {"vector"}; POST /embed_tokens
    {"text"} → {"tokens", "vectors"}; POST /ner {"text"} → {"entities":
    [{"text", "label"}]}; GET /health → model ids and dimensions.
    """

    base_url: str
    timeout: float = 30.0
    session: requests.Session = field(default_factory=requests.Session)

    def __post_init__(self) -> None:
        self.base_url = self.base_url.rstrip("/")
        health = self._get("/health")
        self.embedder_id = health["sentence_model"]
        self.token_model_id = health["token_model"]
        self.model_id = health["ner_model"]
        self.dim = int(health["sentence_dim"])

    def _get(self, route: str) -> dict:
        try:
            response = self.session.get(self.base_url + route, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ClientError(f"GET {route} failed: {exc}") from exc
        if response.status_code != 200:
            raise ClientError(f"GET {route} returned {response.status_code}: {response.text[:200]}")
        return response.json()

    def _post(self, route: str, payload: dict) -> dict:
        try:
            response = self.session.post(self.base_url + route, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ClientError(f"POST {route} failed: {exc}") from exc
        if response.status_code != 200:
            raise ClientError(f"POST {route} returned {response.status_code}: {response.text[:200]}")
        return response.json()

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self._post("/embed_sentence", {"text": text})["vector"], dtype=np.float64)

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        data = self._post("/embed_tokens", {"text": text})
        return list(data["tokens"]), np.asarray(data["vectors"], dtype=np.float64)

    def entities(self, text: str) -> list[tuple[str, str]]:
        data = self._post("/ner", {"text": text})
        return [(item["text"], item["label"]) for item in data["entities"]]


def sentence_embedder_from_config(config: dict) -> SentenceEmbedder:
    """Build a sentence embedder from {"kind": "hashing"|"sidecar", ...}."""
    kind = config.get("kind", "hashing")
    if kind == "hashing":
        return HashingSentenceEmbedder(dim=int(config.get("dim", 256)))
    if kind == "sidecar":
        return SidecarClient(config["base_url"])
    raise ValueError(f"unknown sentence embedder kind {kind!r}")


def token_embedder_from_config(config: dict) -> TokenEmbedder:
    kind = config.get("kind", "hashing")
    if kind == "hashing":
        return HashingTokenEmbedder(dim=int(config.get("dim", 64)))
    if kind == "sidecar":
        return SidecarClient(config["base_url"])
    raise ValueError(f"unknown token embedder kind {kind!r}")


def entity_recognizer_from_config(config: dict) -> EntityRecognizer:
    kind = config.get("kind", "lexicon")
    if kind == "lexicon":
        return LexiconEntityRecognizer()
    if kind == "sidecar":
        return SidecarClient(config["base_url"])
    raise ValueError(f"unknown entity recognizer kind {kind!r}")
