"""Whitespace tokenizer over a closed vocabulary file (one token per line)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
SPECIALS = (PAD, CLS, UNK)


@dataclass
class TextBatch:
    token_ids: torch.Tensor  # (B, L) long, PAD-filled
    lengths: torch.Tensor  # (B,) long, includes the CLS token
    vocab_size: int
    max_length: int

    def __post_init__(self):
        if self.token_ids.numel() and int(self.token_ids.max()) >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")
        if self.lengths.numel() and int(self.lengths.min()) < 1:
            raise ValueError("every sequence needs at least one token")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def select(self, idx) -> "TextBatch":
        idx = torch.as_tensor(idx, dtype=torch.long).reshape(-1)
        return TextBatch(self.token_ids[idx], self.lengths[idx], self.vocab_size, self.max_length)

    @property
    def padding_mask(self) -> torch.Tensor:
        """True where the position is padding."""
        pos = torch.arange(self.token_ids.shape[1])
        return pos[None, :] >= self.lengths[:, None]


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_captions(cls, captions) -> "Vocabulary":
        words = sorted({w for c in captions for w in c.lower().split()})
        return cls(list(SPECIALS) + words)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def encode(self, captions: list[str], max_length: int) -> TextBatch:
        if not captions:
            raise ValueError("no captions to encode")
        unk = self.index[UNK]
        seqs = [([self.index[CLS]] + [self.index.get(w, unk) for w in cap.lower().split()])[:max_length]
                for cap in captions]
        width = max(len(t) for t in seqs)
        ids = torch.zeros(len(captions), width, dtype=torch.long)
        for i, toks in enumerate(seqs):
            ids[i, : len(toks)] = torch.tensor(toks)
        lengths = torch.tensor([len(t) for t in seqs], dtype=torch.long)
        return TextBatch(ids, lengths, len(self), max_length)
