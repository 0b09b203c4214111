"""Offline low-rank adapter training on (prompt, completion) pairs.

Input: a JSONL pairs file in the harness export format, one object per
line with "id", "prompt" and "completion"; an optional sibling
<pairs>.manifest.json carries the sha256 of the prompt template, which
is verified against the template reconstructed from the pairs so the
trained instruction format provably matches what inference will send.

The objective is mean-over-samples cross-entropy on the completion
tokens (prompt tokens masked out); per-step loss is logged to stdout
and to losses.jsonl in the artifact directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from clinex_sidecar.adapter_model import AdapterLM
from clinex_sidecar.bpe import BpeTokenizer

log = logging.getLogger(__name__)

REPORT_MARKER = "Clinical report:\n"


class TrainingDataError(Exception):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    rank: int = 8
    alpha: float = 16.0
    learning_rate: float = 5e-3
    steps: int = 50
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    dim: int = 96
    heads: int = 4
    blocks: int = 2
    max_len: int = 320
    bpe_merges: int = 380
    limit: int | None = None  # train on the first N pairs only

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainingConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)


@dataclass
class TrainingResult:
    artifact_dir: Path
    losses: list[float]
    pair_count: int

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def load_pairs(path: str | Path, limit: int | None = None) -> list[dict]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            record = json.loads(line)
            for key in ("prompt", "completion"):
                if key not in record or not isinstance(record[key], str):
                    raise TrainingDataError(f"pair record missing text field {key!r}: {record}")
            pairs.append(record)
    if not pairs:
        raise TrainingDataError(f"{path}: no pairs")
    return pairs[:limit] if limit else pairs


def template_hash_from_pairs(pairs: list[dict]) -> str:
    """Reconstruct the shared prompt template and hash it.

    Every prompt must be <instruction>{REPORT_MARKER}<report text>; the
    instruction prefix must be identical across pairs.
    """
    prefixes = set()
    for pair in pairs:
        marker_at = pair["prompt"].find(REPORT_MARKER)
        if marker_at < 0:
            raise TrainingDataError(f"prompt for {pair.get('id')!r} lacks the report marker")
        prefixes.add(pair["prompt"][: marker_at + len(REPORT_MARKER)])
    if len(prefixes) != 1:
        raise TrainingDataError(f"pairs use {len(prefixes)} different instruction templates")
    template = prefixes.pop() + "{report}"
    return hashlib.sha256(template.encode("utf-8")).hexdigest()


def verify_manifest(pairs_path: str | Path, pairs: list[dict]) -> str | None:
    """Check the pairs' reconstructed template hash against the exporter's
    manifest, when one sits next to the pairs file."""
    manifest_path = Path(pairs_path).with_suffix(".manifest.json")
    if not manifest_path.exists():
        log.warning("no manifest next to %s; skipping template-hash check", pairs_path)
        return None
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    expected = manifest.get("minimal_template_sha256")
    actual = template_hash_from_pairs(pairs)
    if expected != actual:
        raise TrainingDataError(
            f"template hash mismatch: pairs reconstruct to {actual}, manifest declares {expected}"
        )
    return actual


def train_adapter(
    pairs_path: str | Path,
    out_dir: str | Path,
    config: TrainingConfig = TrainingConfig(),
) -> TrainingResult:
    """Train adapters on the pairs and write the artifact directory.

    Artifact contents: base.pt (frozen weights), adapter.pt (trained
    low-rank + embedding weights), tokenizer.json, config.json and
    losses.jsonl.  Runs on CPU in well under the smoke budget.
    """
    pairs = load_pairs(pairs_path, config.limit)
    template_hash = verify_manifest(pairs_path, pairs)

    torch.manual_seed(config.seed)
    texts = [pair["prompt"] for pair in pairs] + [pair["completion"] for pair in pairs]
    tokenizer = BpeTokenizer.train(texts, config.bpe_merges)

    encoded = []
    for pair in pairs:
        prompt_ids = tokenizer.encode(pair["prompt"])
        completion_ids = tokenizer.encode(pair["completion"])
        ids = [tokenizer.bos_id] + prompt_ids + completion_ids + [tokenizer.eos_id]
        if len(ids) > config.max_len:
            raise TrainingDataError(
                f"pair {pair.get('id')!r} encodes to {len(ids)} tokens > max_len {config.max_len}"
            )
        encoded.append((ids, 1 + len(prompt_ids)))

    model = AdapterLM(
        vocab_size=len(tokenizer),
        dim=config.dim,
        heads=config.heads,
        blocks=config.blocks,
        rank=config.rank,
        alpha=config.alpha,
        max_len=config.max_len,
    )
    trainable = [param for param in model.parameters() if param.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)

    def batch_for(indices: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(encoded[i][0]) for i in indices)
        ids = torch.full((len(indices), width), tokenizer.pad_id, dtype=torch.long)
        mask = torch.zeros(len(indices), width, dtype=torch.bool)
        for row, i in enumerate(indices):
            seq, loss_from = encoded[i]
            ids[row, : len(seq)] = torch.tensor(seq)
            mask[row, loss_from : len(seq)] = True
        return ids, mask

    batch_size = config.batch_size or len(encoded)
    order: list[int] = []
    losses: list[float] = []
    started = time.monotonic()
    model.train()
    for step in range(config.steps):
        if len(order) < batch_size:
            order += torch.randperm(len(encoded), generator=generator).tolist()
        indices, order = order[:batch_size], order[batch_size:]
        ids, mask = batch_for(indices)
        optimizer.zero_grad()
        logits = model(ids[:, :-1])
        targets = ids[:, 1:]
        target_mask = mask[:, 1:]
        per_token = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
        ).view(targets.shape)
        per_sample = (per_token * target_mask).sum(1) / target_mask.sum(1)
        loss = per_sample.mean()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        log.info("step %d/%d loss %.4f", step + 1, config.steps, losses[-1])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.base_state(), out_dir / "base.pt")
    torch.save(model.adapter_state(), out_dir / "adapter.pt")
    tokenizer.save(out_dir / "tokenizer.json")
    (out_dir / "config.json").write_text(
        json.dumps(
            {
                **asdict(config),
                "vocab_size": len(tokenizer),
                "pairs": len(pairs),
                "template_sha256": template_hash,
                "train_seconds": round(time.monotonic() - started, 2),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    with (out_dir / "losses.jsonl").open("w", encoding="utf-8") as handle:
        for step, value in enumerate(losses):
            handle.write(json.dumps({"step": step, "loss": value}) + "\n")

    return TrainingResult(artifact_dir=out_dir, losses=losses, pair_count=len(pairs))


def load_artifact(artifact_dir: str | Path) -> tuple[AdapterLM, BpeTokenizer]:
    artifact_dir = Path(artifact_dir)
    meta = json.loads((artifact_dir / "config.json").read_text(encoding="utf-8"))
    tokenizer = BpeTokenizer.load(artifact_dir / "tokenizer.json")
    model = AdapterLM(
        vocab_size=meta["vocab_size"],
        dim=meta["dim"],
        heads=meta["heads"],
        blocks=meta["blocks"],
        rank=meta["rank"],
        alpha=meta["alpha"],
        max_len=meta["max_len"],
    )
    base = torch.load(artifact_dir / "base.pt", weights_only=True)
    adapter = torch.load(artifact_dir / "adapter.pt", weights_only=True)
    model.load_split_state(base, adapter)
    return model, tokenizer


def complete_text(model: AdapterLM, tokenizer: BpeTokenizer, prompt: str, max_new_tokens: int = 160) -> str:
    prompt_ids = [tokenizer.bos_id] + tokenizer.encode(prompt)
    out_ids = model.generate_greedy(prompt_ids, eos_id=tokenizer.eos_id, max_new_tokens=max_new_tokens)
    return tokenizer.decode(out_ids)


def main() -> None:
    parser = argparse.ArgumentParser(description="Train a low-rank adapter on exported pairs.")
    parser.add_argument("--pairs", required=True, help="pairs JSONL from the harness exporter")
    parser.add_argument("--out", required=True, help="artifact output directory")
    parser.add_argument("--config", default=None, help="JSON training config")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--limit", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    config = TrainingConfig.from_file(args.config) if args.config else TrainingConfig()
    overrides = {
        key: value
        for key, value in (("steps", args.steps), ("limit", args.limit), ("seed", args.seed))
        if value is not None
    }
    if overrides:
        config = TrainingConfig(**{**asdict(config), **overrides})
    result = train_adapter(args.pairs, args.out, config)
    print(
        f"trained on {result.pair_count} pairs for {len(result.losses)} steps: "
        f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}; artifact at {result.artifact_dir}"
    )


if __name__ == "__main__":
    main()
