"""Deterministic toy text encoder.

Stand-in for a pretrained language-image encoder: lowercase whitespace
tokens are hashed into a frozen seeded embedding table, then passed through
a learned position-mixing layer (trained jointly with the denoiser) and
mean-pooled. The reserved null prompt maps to a single all-zero token, which
stays all-zero through the bias-free mixing layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream, fnv1a64
from . import tensor as T

VOCAB_SIZE = 512
TEXT_DIM = 32
MAX_TOKENS = 12


@dataclass
class TextEmbedding:
    tokens: T.Tensor          # (L, TEXT_DIM), truncated to real tokens
    pooled: np.ndarray        # (TEXT_DIM,)
    padded: T.Tensor          # (MAX_TOKENS, TEXT_DIM), for masked batching
    length: int = 1
    is_null: bool = False


class TextEncoder:
    def __init__(self, seed: int, d_txt: int = TEXT_DIM, vocab: int = VOCAB_SIZE,
                 max_tokens: int = MAX_TOKENS):
        self.d_txt = d_txt
        self.vocab = vocab
        self.max_tokens = max_tokens
        stream = Stream(seed, "text-embed-table")
        self.table = stream.normal((vocab, d_txt)) / np.sqrt(d_txt)
        self.mix = T.Tensor(np.eye(max_tokens), requires_grad=True)

    def token_ids(self, text: str) -> list[int]:
        return [fnv1a64(tok.encode("utf-8")) % self.vocab for tok in text.lower().split()]

    def raw_rows(self, text: str) -> tuple[np.ndarray, int]:
        """Pre-mix embedding rows padded to max_tokens, plus the real length."""
        ids = self.token_ids(text)[: self.max_tokens]
        rows = np.zeros((self.max_tokens, self.d_txt))
        rows[: len(ids)] = self.table[ids]
        return rows, len(ids)

    def encode(self, text: str | None) -> TextEmbedding:
        """Embed a prompt; None or empty text yields the null embedding."""
        if text is None or not text.strip():
            return self.null_embedding()
        rows, L = self.raw_rows(text)
        selector = np.zeros((L, self.max_tokens))
        selector[np.arange(L), np.arange(L)] = 1.0
        mixed_full = T.matmul(self.mix, T.Tensor(rows))
        mixed = T.matmul(T.Tensor(selector), mixed_full)
        return TextEmbedding(tokens=mixed, pooled=mixed.data.mean(axis=0),
                             padded=mixed_full, length=L)

    def null_embedding(self) -> TextEmbedding:
        z = T.Tensor(np.zeros((1, self.d_txt)))
        pad = T.Tensor(np.zeros((self.max_tokens, self.d_txt)))
        return TextEmbedding(tokens=z, pooled=np.zeros(self.d_txt),
                             padded=pad, length=1, is_null=True)

    def state(self) -> dict[str, np.ndarray]:
        return {"textenc.table": self.table, "textenc.mix.w": self.mix.data}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.table = state["textenc.table"].copy()
        self.mix = T.Tensor(state["textenc.mix.w"].copy(), requires_grad=True)
