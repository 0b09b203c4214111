"""Tiny causal language model with low-rank adapters.

The transformer body stays frozen; rank-r adapter matrices on every
attention and MLP projection carry the task signal.  Token/position
embeddings and layer norms train too, since no pretrained vocabulary
exists at this scale.  Adapter state (the trainable subset) is saved
separately from the frozen base so the artifact split mirrors how
low-rank fine-tunes ship.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoRALinear(nn.Module):
    """y = W0 x + (alpha/r) * B A x with W0 frozen, A gaussian, B zero."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.lora_A = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scale = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def _init_linear(d_in: int, d_out: int) -> nn.Linear:
    linear = nn.Linear(d_in, d_out)
    nn.init.normal_(linear.weight, std=0.02)
    nn.init.zeros_(linear.bias)
    return linear


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int, alpha: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.heads = heads
        self.q = LoRALinear(_init_linear(dim, dim), rank, alpha)
        self.k = LoRALinear(_init_linear(dim, dim), rank, alpha)
        self.v = LoRALinear(_init_linear(dim, dim), rank, alpha)
        self.o = LoRALinear(_init_linear(dim, dim), rank, alpha)
        self.up = LoRALinear(_init_linear(dim, 4 * dim), rank, alpha)
        self.down = LoRALinear(_init_linear(4 * dim, dim), rank, alpha)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        batch, seq, dim = x.shape
        h = self.ln1(x)
        q = self.q(h).view(batch, seq, self.heads, -1).transpose(1, 2)
        k = self.k(h).view(batch, seq, self.heads, -1).transpose(1, 2)
        v = self.v(h).view(batch, seq, self.heads, -1).transpose(1, 2)
        attention = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        attention = attention.masked_fill(causal_mask, float("-inf")).softmax(-1)
        x = x + self.o((attention @ v).transpose(1, 2).reshape(batch, seq, dim))
        return x + self.down(F.gelu(self.up(self.ln2(x))))


class AdapterLM(nn.Module):
    """Causal LM: tied-embedding head, frozen body, trainable adapters."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 96,
        heads: int = 4,
        blocks: int = 2,
        rank: int = 8,
        alpha: float = 16.0,
        max_len: int = 320,
    ):
        super().__init__()
        self.max_len = max_len
        self.emb = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.emb.weight, std=0.02)
        self.pos = nn.Embedding(max_len, dim)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, rank, alpha) for _ in range(blocks))
        self.ln_out = nn.LayerNorm(dim)
        self._mark_trainable()

    def _mark_trainable(self) -> None:
        for name, param in self.named_parameters():
            trainable = (
                "lora_A" in name
                or "lora_B" in name
                or name.startswith("emb")
                or name.startswith("pos")
                or "ln" in name
            )
            param.requires_grad_(trainable)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        _, seq = ids.shape
        x = self.emb(ids) + self.pos(torch.arange(seq, device=ids.device))
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=ids.device), diagonal=1)
        for block in self.blocks:
            x = block(x, causal)
        return self.ln_out(x) @ self.emb.weight.T

    def adapter_state(self) -> dict[str, torch.Tensor]:
        return {
            name: param.detach().clone()
            for name, param in self.named_parameters()
            if param.requires_grad
        }

    def base_state(self) -> dict[str, torch.Tensor]:
        return {
            name: param.detach().clone()
            for name, param in self.named_parameters()
            if not param.requires_grad
        }

    def load_split_state(self, base: dict, adapter: dict) -> None:
        state = dict(base)
        state.update(adapter)
        self.load_state_dict(state, strict=True)

    @torch.no_grad()
    def generate_greedy(self, prompt_ids: list[int], eos_id: int, max_new_tokens: int = 160) -> list[int]:
        self.eval()
        seq = list(prompt_ids)
        for _ in range(max_new_tokens):
            window = seq[-self.max_len :]
            logits = self(torch.tensor([window]))
            next_id = int(logits[0, -1].argmax())
            if next_id == eos_id:
                break
            seq.append(next_id)
        return seq[len(prompt_ids) :]
