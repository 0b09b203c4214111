"""HTTP service exposing the three model roles.

Wire API (JSON bodies):
    POST /embed_sentence {"text"}  -> {"vector": [float, ...]}
    POST /embed_tokens   {"text"}  -> {"tokens": [...], "vectors": [[...], ...]}
    POST /ner            {"text"}  -> {"entities": [{"text", "label"}, ...]}
    GET  /health                   -> model ids, dims, status

Embedding endpoints reject empty text with 400; a route whose model is
not loaded answers 503.  Declared dimensions are verified against a
probe at startup and re-asserted on every response.
"""

from __future__ import annotations

import argparse
import logging

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from clinex_sidecar.backends import HashedSentenceEncoder, HashedTokenEncoder, RuleLexiconNER
from clinex_sidecar.config import SidecarConfig

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6


class TextRequest(BaseModel):
    text: str


def _assert_unit_rows(matrix: np.ndarray, dim: int, what: str) -> None:
    if matrix.ndim != 2 or matrix.shape[1] != dim:
        raise HTTPException(500, f"{what}: dimension {matrix.shape} does not match declared {dim}")
    if matrix.shape[0]:
        worst = float(np.abs(np.linalg.norm(matrix, axis=1) - 1.0).max())
        if worst > UNIT_NORM_TOL:
            raise HTTPException(500, f"{what}: row norms deviate from 1 by {worst:.2e}")


def create_app(
    config: SidecarConfig | None = None,
    *,
    sentence_encoder: HashedSentenceEncoder | None = None,
    token_encoder: HashedTokenEncoder | None = None,
    ner_model: RuleLexiconNER | None = None,
    load_defaults: bool = True,
) -> FastAPI:
    """Build the service; pass load_defaults=False plus explicit models to
    run with a subset loaded (missing roles answer 503)."""
    config = config or SidecarConfig()
    if load_defaults:
        sentence_encoder = sentence_encoder or HashedSentenceEncoder(dim=config.sentence_dim)
        token_encoder = token_encoder or HashedTokenEncoder(dim=config.token_dim)
        ner_model = ner_model or RuleLexiconNER()

    # Startup self-check: declared dims must match real outputs.
    if sentence_encoder is not None:
        probe = sentence_encoder.encode("dimension probe")
        if probe.shape != (config.sentence_dim,):
            raise ValueError(
                f"sentence encoder produces dim {probe.shape}, config declares {config.sentence_dim}"
            )
    if token_encoder is not None:
        _, probe_matrix = token_encoder.encode("dimension probe")
        if probe_matrix.shape[1] != config.token_dim:
            raise ValueError(
                f"token encoder produces dim {probe_matrix.shape[1]}, config declares {config.token_dim}"
            )

    app = FastAPI(title="clinex-sidecar")

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "sentence_model": sentence_encoder.model_id if sentence_encoder else None,
            "sentence_dim": config.sentence_dim,
            "token_model": token_encoder.model_id if token_encoder else None,
            "token_dim": config.token_dim,
            "ner_model": ner_model.model_id if ner_model else None,
        }

    @app.post("/embed_sentence")
    def embed_sentence(request: TextRequest):
        if sentence_encoder is None:
            raise HTTPException(503, "sentence model not loaded")
        if not request.text.strip():
            raise HTTPException(400, "text must be nonempty")
        vector = sentence_encoder.encode(request.text)
        _assert_unit_rows(vector.reshape(1, -1), config.sentence_dim, "embed_sentence")
        return {"vector": vector.tolist()}

    @app.post("/embed_tokens")
    def embed_tokens(request: TextRequest):
        if token_encoder is None:
            raise HTTPException(503, "token model not loaded")
        if not request.text.strip():
            raise HTTPException(400, "text must be nonempty")
        tokens, matrix = token_encoder.encode(request.text)
        _assert_unit_rows(matrix, config.token_dim, "embed_tokens")
        return {"tokens": tokens, "vectors": matrix.tolist()}

    @app.post("/ner")
    def ner(request: TextRequest):
        if ner_model is None:
            raise HTTPException(503, "ner model not loaded")
        entities = ner_model.recognize(request.text)
        return {"entities": [{"text": surface, "label": label} for surface, label in entities]}

    return app


def main() -> None:
    import uvicorn

    parser = argparse.ArgumentParser(description="Run the model sidecar service.")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args()

    config = SidecarConfig.from_file(args.config) if args.config else SidecarConfig()
    if args.host or args.port:
        config = SidecarConfig(
            host=args.host or config.host,
            port=args.port or config.port,
            sentence_dim=config.sentence_dim,
            token_dim=config.token_dim,
        )
    logging.basicConfig(level=logging.INFO)
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
