"""Sidecar configuration: bind address and declared model dimensions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class SidecarConfig:
    host: str = "127.0.0.1"
    port: int = 8230
    sentence_dim: int = 384
    token_dim: int = 128

    def __post_init__(self) -> None:
        if self.sentence_dim < 1 or self.token_dim < 1:
            raise ValueError("embedding dimensions must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "SidecarConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 8230)),
            sentence_dim=int(data.get("sentence_dim", 384)),
            token_dim=int(data.get("token_dim", 128)),
        )
