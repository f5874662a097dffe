"""Model loading: a seeded tiny causal LM for offline runs, or any HF model id.

The ``tiny[:seed]`` spec builds a randomly initialized 4-layer Llama-style
model over a word vocabulary derived from the input corpus. It runs the
exact code paths of a production extraction (teacher forcing, eager
attention) at toy scale, so pipelines can be validated without downloading
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch

from .errors import ModelLoadError
from .tokenizer import WordTokenizer

TINY_MAX_POSITIONS = 512


@dataclass
class ExtractionModel:
    model: object
    tokenizer: WordTokenizer
    name: str
    n_layers: int
    max_positions: int


def _build_tiny(corpus: Iterable[str], seed: int) -> ExtractionModel:
    from transformers import LlamaConfig, LlamaForCausalLM

    tokenizer = WordTokenizer.build(corpus)
    torch.manual_seed(seed)
    config = LlamaConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=4,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=TINY_MAX_POSITIONS,
        attn_implementation="eager",
    )
    model = LlamaForCausalLM(config)
    model.eval()
    return ExtractionModel(
        model=model,
        tokenizer=tokenizer,
        name=f"tiny-llama-4l-64d-seed{seed}",
        n_layers=config.num_hidden_layers,
        max_positions=TINY_MAX_POSITIONS,
    )


def load_model(spec: str, corpus: Iterable[str] | None = None) -> ExtractionModel:
    """Load ``tiny[:seed]`` (corpus required) or a HF model identifier."""
    if spec == "tiny" or spec.startswith("tiny:"):
        if corpus is None:
            raise ModelLoadError("tiny model needs the input corpus to build its vocabulary")
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return _build_tiny(corpus, seed)
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer
        hf_model = AutoModelForCausalLM.from_pretrained(spec, attn_implementation="eager")
        hf_tok = AutoTokenizer.from_pretrained(spec)
    except Exception as exc:
        raise ModelLoadError(f"could not load {spec!r}: {exc}") from exc
    hf_model.eval()
    return ExtractionModel(
        model=hf_model,
        tokenizer=_HFTokenizerAdapter(hf_tok),
        name=spec,
        n_layers=hf_model.config.num_hidden_layers,
        max_positions=getattr(hf_model.config, "max_position_embeddings", 4096),
    )


class _HFTokenizerAdapter:
    """Duck-typed WordTokenizer interface over a HuggingFace tokenizer."""

    def __init__(self, tok):
        self._tok = tok

    @property
    def bos_id(self) -> int:
        return self._tok.bos_token_id if self._tok.bos_token_id is not None else 0

    def pieces(self, text: str) -> list[str]:
        ids = self._tok.encode(text, add_special_tokens=False)
        return [self._tok.decode([i]) for i in ids]

    def piece_id(self, piece: str) -> int:
        ids = self._tok.encode(piece, add_special_tokens=False)
        return ids[0] if ids else self._tok.unk_token_id

    def encode_pieces(self, pieces) -> list[int]:
        return [self.piece_id(p) for p in pieces]

    def encode_text(self, text: str):
        pieces = self.pieces(text)
        return pieces, self.encode_pieces(pieces)
