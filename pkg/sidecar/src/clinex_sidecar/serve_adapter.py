"""Serve a trained adapter artifact behind the chat-completion wire format.

The harness (or anything speaking the same wire) POSTs {model, messages,
...}; the last user message is the prompt and the greedy completion
comes back as the first choice's message content.
"""

from __future__ import annotations

import argparse
import logging

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from clinex_sidecar.train import complete_text, load_artifact

log = logging.getLogger(__name__)


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str = ""
    messages: list[ChatMessage]
    temperature: float = 0.0
    max_tokens: int = 256


def create_app(artifact_dir: str) -> FastAPI:
    model, tokenizer = load_artifact(artifact_dir)
    app = FastAPI(title="clinex-sidecar-adapter")

    @app.get("/health")
    def health():
        return {"status": "ok", "artifact": str(artifact_dir)}

    @app.post("/chat/completions")
    def chat(request: ChatRequest):
        user_messages = [m for m in request.messages if m.role == "user"]
        if not user_messages:
            raise HTTPException(400, "no user message")
        completion = complete_text(
            model, tokenizer, user_messages[-1].content, max_new_tokens=request.max_tokens
        )
        return {"choices": [{"message": {"role": "assistant", "content": completion}}]}

    return app


def main() -> None:
    import uvicorn

    parser = argparse.ArgumentParser(description="Serve a trained adapter artifact.")
    parser.add_argument("--artifact", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8240)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    uvicorn.run(create_app(args.artifact), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
