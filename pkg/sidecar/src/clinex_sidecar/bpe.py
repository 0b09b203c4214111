"""Minimal byte-pair-encoding tokenizer trained on the training pairs.

Character-level start, greedy most-frequent-pair merges.  The learned
merges absorb the structured-output glue (quote-colon, comma-space), so
the language model sees short, grammar-friendly sequences.  Encoding is
exactly invertible: ''.join(pieces) == text.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def train_merges(texts: Iterable[str], n_merges: int) -> list[tuple[str, str]]:
    sequences = [list(text) for text in texts]
    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        counts: Counter = Counter()
        for seq in sequences:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        (a, b), freq = counts.most_common(1)[0]
        if freq < 2:
            break
        merges.append((a, b))
        merged = a + b
        for seq in sequences:
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seq[:] = out
    return merges


@dataclass
class BpeTokenizer:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]

    @classmethod
    def train(cls, texts: Sequence[str], n_merges: int) -> "BpeTokenizer":
        merges = train_merges(texts, n_merges)
        tokenizer = cls(merges, {})
        vocab = {token: i for i, token in enumerate(SPECIALS)}
        for text in texts:
            for piece in tokenizer.pieces(text):
                if piece not in vocab:
                    vocab[piece] = len(vocab)
        tokenizer.vocab = vocab
        return tokenizer

    def _ranks(self) -> dict[tuple[str, str], int]:
        if not hasattr(self, "_rank_cache"):
            self._rank_cache = {pair: i for i, pair in enumerate(self.merges)}
        return self._rank_cache

    def pieces(self, text: str) -> list[str]:
        seq = list(text)
        ranks = self._ranks()
        while len(seq) > 1:
            best_rank = None
            best_pair = None
            for pair in zip(seq, seq[1:]):
                rank = ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            a, b = best_pair
            merged = a + b
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seq = out
        return seq

    def encode(self, text: str) -> list[int]:
        unk = self.vocab[UNK]
        return [self.vocab.get(piece, unk) for piece in self.pieces(text)]

    def decode(self, ids: Sequence[int]) -> str:
        inverse = {i: token for token, i in self.vocab.items()}
        return "".join(
            inverse[i] for i in ids if inverse.get(i) not in SPECIALS and i in inverse
        )

    @property
    def pad_id(self) -> int:
        return self.vocab[PAD]

    @property
    def bos_id(self) -> int:
        return self.vocab[BOS]

    @property
    def eos_id(self) -> int:
        return self.vocab[EOS]

    def __len__(self) -> int:
        return len(self.vocab)

    def save(self, path: str | Path) -> None:
        payload = {"merges": [list(pair) for pair in self.merges], "vocab": self.vocab}
        Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([tuple(pair) for pair in data["merges"]], dict(data["vocab"]))
