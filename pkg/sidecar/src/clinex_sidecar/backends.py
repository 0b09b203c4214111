"""Deterministic model backends served by the sidecar.

No pretrained checkpoints are downloadable in the deployment targets
this runs in, so every backend is a self-contained deterministic model:
hashed-feature encoders for sentences and tokens, and a lexicon+suffix
rule recognizer for clinical entities.  Model ids name implementation
and dimension so mixed-version indexes are detectable downstream.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _seed_for(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")


class HashedSentenceEncoder:
    """Signed feature hashing over unigrams and bigrams, L2-normalized."""

    def __init__(self, dim: int = 384):
        self.dim = dim
        self.model_id = f"hashed-bow-{dim}-v1"

    def encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        features = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        vector = np.zeros(self.dim, dtype=np.float64)
        for feature in features:
            digest = hashlib.sha256(feature.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            vector[bucket] += 1.0 if digest[8] % 2 == 0 else -1.0
        norm = np.linalg.norm(vector)
        if norm > 0:
            vector /= norm
        return vector


class HashedTokenEncoder:
    """One unit-norm pseudo-embedding row per token, seeded by the token."""

    def __init__(self, dim: int = 128):
        self.dim = dim
        self.model_id = f"hashed-tok-{dim}-v1"
        self._cache: dict[str, list[float]] = {}

    def encode(self, text: str) -> tuple[list[str], np.ndarray]:
        tokens = tokenize(text)
        rows = []
        for token in tokens:
            cached = self._cache.get(token)
            if cached is None:
                rng = np.random.default_rng(_seed_for(token))
                row = rng.standard_normal(self.dim)
                row /= np.linalg.norm(row)
                cached = row.tolist()
                self._cache[token] = cached
            rows.append(cached)
        matrix = np.array(rows, dtype=np.float64) if rows else np.empty((0, self.dim))
        return tokens, matrix


# Lexicon entries: term -> label.  Suffix rules catch derivatives the
# lexicon misses (e.g. "cholangitis", "enoxaparin" analogues).
_MEDICATIONS = (
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
_DIAGNOSES = (
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
_MULTIWORD = (
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
_DIAGNOSIS_SUFFIXES = ("itis", "emia", "osis", "pathy", "algia", "oma")
_MEDICATION_SUFFIXES = ("cillin", "mycin", "oxacin", "olol", "pril", "sartan", "statin", "azole", "parin", "mab")

# Common words the suffix rules must never fire on.
_SUFFIX_STOPLIST = {"coma", "aroma", "diploma", "stroma", "soma"}


class RuleLexiconNER:
    """Longest-match lexicon scan with morphological suffix fallbacks."""

    def __init__(self) -> None:
        self.model_id = "lexicon-rule-ner-v1"
        self._by_tokens: dict[tuple[str, ...], str] = {}
        for term, label in _MULTIWORD:
            self._by_tokens[tuple(tokenize(term))] = label
        for term in _MEDICATIONS:
            self._by_tokens[(term,)] = "medication"
        for term in _DIAGNOSES:
            self._by_tokens[(term,)] = "diagnosis"
        self._max_len = max(len(key) for key in self._by_tokens)

    def _suffix_label(self, token: str) -> str | None:
        if len(token) < 6 or token in _SUFFIX_STOPLIST:
            return None
        if token.endswith(_DIAGNOSIS_SUFFIXES):
            return "diagnosis"
        if token.endswith(_MEDICATION_SUFFIXES):
            return "medication"
        return None

    def recognize(self, text: str) -> list[tuple[str, str]]:
        tokens = tokenize(text)
        found: list[tuple[str, str]] = []
        i = 0
        while i < len(tokens):
            matched = False
            for span in range(min(self._max_len, len(tokens) - i), 0, -1):
                candidate = tuple(tokens[i : i + span])
                label = self._by_tokens.get(candidate)
                if label is not None:
                    found.append((" ".join(candidate), label))
                    i += span
                    matched = True
                    break
            if not matched:
                label = self._suffix_label(tokens[i])
                if label is not None:
                    found.append((tokens[i], label))
                i += 1
        return found
