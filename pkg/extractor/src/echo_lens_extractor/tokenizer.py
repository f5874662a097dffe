"""Whitespace word tokenizer with a closed vocabulary built from a corpus.

Token pieces carry a leading space (continuation style) so concatenating
a record's trace tokens reproduces the normalized text. One word is one
token, which keeps word offsets and token offsets identical downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

PAD = "<pad>"
BOS = "<bos>"
UNK = "<unk>"


@dataclass
class WordTokenizer:
    vocab: dict[str, int]
    inverse: dict[int, str] = field(init=False)

    def __post_init__(self):
        self.inverse = {i: w for w, i in self.vocab.items()}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "WordTokenizer":
        words = sorted({w for text in texts for w in text.split()})
        vocab = {PAD: 0, BOS: 1, UNK: 2}
        for word in words:
            vocab[word] = len(vocab)
        return cls(vocab=vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def bos_id(self) -> int:
        return self.vocab[BOS]

    def pieces(self, text: str) -> list[str]:
        return [f" {word}" for word in text.split()]

    def piece_id(self, piece: str) -> int:
        return self.vocab.get(piece.strip(), self.vocab[UNK])

    def encode_pieces(self, pieces: Iterable[str]) -> list[int]:
        return [self.piece_id(p) for p in pieces]

    def encode_text(self, text: str) -> tuple[list[str], list[int]]:
        pieces = self.pieces(text)
        return pieces, self.encode_pieces(pieces)
