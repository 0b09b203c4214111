"""Exact cosine-similarity retrieval over embedded training reports.

The index stores one unit-norm vector per training report.  Search is a
deliberate brute-force scan: at corpus scale (tens of thousands of rows)
an exact argsort is fast, and determinism matters more than speed here.

Persistence layout (UTF-8, ``\\n`` line endings):

    line 1:    JSON header ``{"format": "clinex-embedding-index",
               "version": 1, "dim": D, "embedder_id": ..., "rows": N}``
    lines 2..: one JSON object per row ``{"id": ..., "v": ...}`` where
               ``v`` is the base64 of the vector's little-endian float32
               bytes.  Rows round-trip bit-exactly.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from clinex.clients import SentenceEmbedder
    from clinex.corpus import Corpus

log = logging.getLogger(__name__)

INDEX_FORMAT = "clinex-embedding-index"
INDEX_VERSION = 1
UNIT_NORM_TOL = 1e-6
DEFAULT_M = 3


class RetrievalError(Exception):
    pass


class DimensionMismatch(RetrievalError):
    pass


class ZeroVector(RetrievalError):
    pass


class EmptyIndex(RetrievalError):
    pass


class DuplicateId(RetrievalError):
    pass


class DegenerateEmbedding(RetrievalError):
    pass


class EmbedderMismatch(RetrievalError):
    """Query embedder differs from the one that built the index."""


def cosine_similarity(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatch(f"incompatible shapes {u.shape} and {v.shape}")
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


@dataclass(frozen=True)
class RetrievalConfig:
    """How many in-context examples to retrieve per query."""

    m: int = DEFAULT_M

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")


class EmbeddingIndex:
    """Immutable (id, unit vector) store for one embedder."""

    def __init__(self, embedder_id: str, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise RetrievalError("vectors must be a 2-D array")
        if len(ids) != vectors.shape[0]:
            raise RetrievalError(f"{len(ids)} ids for {vectors.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise DuplicateId("index ids must be unique")
        if vectors.shape[0]:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > UNIT_NORM_TOL:
                raise RetrievalError(f"row norms deviate from 1 by up to {worst:.2e}")
        self.embedder_id = embedder_id
        self.ids: tuple[str, ...] = tuple(ids)
        self.vectors = vectors.copy()
        self.vectors.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def normalize(vector: np.ndarray) -> np.ndarray:
    """Unit-normalize a vector; raises DegenerateEmbedding near zero norm."""
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm < 1e-12:
        raise DegenerateEmbedding("embedding has (near-)zero norm")
    return (vector / norm).astype(np.float32)


def build_index(train: "Corpus", embedder: "SentenceEmbedder") -> EmbeddingIndex:
    """Embed every training report and store the unit-normalized vectors."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for sample in train:
        if sample.id in seen:
            raise DuplicateId(f"duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        vector = embedder.embed(sample.report.text)
        try:
            rows.append(normalize(vector))
        except DegenerateEmbedding as exc:
            raise DegenerateEmbedding(f"sample {sample.id!r}: {exc}") from exc
        ids.append(sample.id)
    if not rows:
        raise EmptyIndex("training corpus is empty")
    return EmbeddingIndex(embedder.embedder_id, ids, np.stack(rows))


def retrieve_top_m(index: EmbeddingIndex, query: np.ndarray, m: int) -> list[tuple[str, float]]:
    """Exact top-m search: similarity descending, ties by ascending id.

    The query is normalized internally, so any positive scaling of it
    returns the identical ranking.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if len(index) == 0:
        raise EmptyIndex("index has no rows")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise DimensionMismatch(f"query dim {query.shape[0]} != index dim {index.dim}")
    norm = float(np.linalg.norm(query))
    if norm == 0.0:
        raise ZeroVector("query vector is zero")
    sims = index.vectors.astype(np.float64) @ (query / norm)
    np.clip(sims, -1.0, 1.0, out=sims)
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.ids[i]))
    return [(index.ids[i], float(sims[i])) for i in order[:m]]


def retrieve_for_text(
    index: EmbeddingIndex,
    text: str,
    embedder: "SentenceEmbedder",
    m: int,
) -> list[tuple[str, float]]:
    """Embed a query text with the index's embedder and search.

    Mixing embedders silently breaks cosine comparability, so a mismatch
    between embedder ids is a hard error.
    """
    if embedder.embedder_id != index.embedder_id:
        raise EmbedderMismatch(
            f"index built with {index.embedder_id!r} but query uses {embedder.embedder_id!r}"
        )
    return retrieve_top_m(index, np.asarray(embedder.embed(text), dtype=np.float64), m)


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    path = Path(path)
    header = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "dim": index.dim,
        "embedder_id": index.embedder_id,
        "rows": len(index),
    }
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps(header, ensure_ascii=False) + "\n")
        for sample_id, row in zip(index.ids, index.vectors):
            encoded = base64.b64encode(row.astype("<f4").tobytes()).decode("ascii")
            handle.write(json.dumps({"id": sample_id, "v": encoded}) + "\n")


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        header_line = handle.readline()
        try:
            header = json.loads(header_line)
        except ValueError as exc:
            raise RetrievalError(f"{path}: bad index header: {exc}") from exc
        if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
            raise RetrievalError(f"{path}: not a version-{INDEX_VERSION} {INDEX_FORMAT} file")
        dim = header["dim"]
        ids: list[str] = []
        rows: list[np.ndarray] = []
        for line in handle:
            if not line.strip():
                continue
            record = json.loads(line)
            vector = np.frombuffer(base64.b64decode(record["v"]), dtype="<f4")
            if vector.shape[0] != dim:
                raise RetrievalError(f"{path}: row {record['id']!r} has dim {vector.shape[0]}, header says {dim}")
            ids.append(record["id"])
            rows.append(vector)
        if len(ids) != header["rows"]:
            raise RetrievalError(f"{path}: header claims {header['rows']} rows, found {len(ids)}")
    vectors = np.stack(rows) if rows else np.empty((0, dim), dtype=np.float32)
    return EmbeddingIndex(header["embedder_id"], ids, vectors)
