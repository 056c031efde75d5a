"""Sentence and question encoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, VocabularyError
from .nn import GruCell, init_weights, param, run_gru

PAD = "<pad>"
UNK = "<unk>"


class Vocabulary:
    """Token <-> index map with PAD at 0 and UNK at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos[2:])

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> Vocabulary:
        return cls(tokens)


@dataclass
class EmbeddingTable:
    """|V| x D word embeddings. Row 0 (PAD) is held at zero."""

    weight: Tensor

    @classmethod
    def create(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> EmbeddingTable:
        w = init_weights("uniform", (vocab_size, dim), rng)
        w[0] = 0.0
        return cls(param(w, "weight"))

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __len__(self) -> int:
        return self.weight.shape[0]

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise VocabularyError(f"token index out of range for vocabulary of {len(self)}")
        return ad.embed(self.weight, ids)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight}


def positional_weights(M: int, D: int) -> np.ndarray:
    """l[j-1, d-1] = (1 - j/M) - (d/D)(1 - 2j/M) with 1-based j and d."""
    if M < 1 or D < 1:
        raise ValueError("positional_weights needs M >= 1 and D >= 1")
    j = np.arange(1, M + 1, dtype=float)[:, None]
    d = np.arange(1, D + 1, dtype=float)[None, :]
    return (1.0 - j / M) - (d / D) * (1.0 - 2.0 * j / M)


def padded_positional_weights(lengths: np.ndarray, M: int, D: int) -> np.ndarray:
    """Positional weights for padded sentences, shape ``lengths.shape + (M, D)``.

    Each sentence uses its own true length; rows past it are zero.
    """
    lengths = np.asarray(lengths, dtype=float)[..., None, None]
    j = np.arange(1, M + 1, dtype=float)[:, None]
    d = np.arange(1, D + 1, dtype=float)[None, :]
    safe = np.where(lengths > 0, lengths, 1.0)
    w = (1.0 - j / safe) - (d / D) * (1.0 - 2.0 * j / safe)
    return np.where(j <= lengths, w, 0.0)


def encode_sentences_pe(tokens: np.ndarray, emb: EmbeddingTable) -> Tensor:
    """Positional encoding of padded token arrays ``[..., M]`` -> ``[..., D]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = (tokens != 0).sum(axis=-1)
    weights = padded_positional_weights(lengths, tokens.shape[-1], emb.dim)
    words = emb.lookup(tokens)
    return ad.reduce_sum(ad.mul(words, ad.const(weights)), axis=-2)


def encode_sentence_pe(sentence: Sequence[int], emb: EmbeddingTable) -> Tensor:
    """f = sum_j l_j * w_j for one sentence of word indices."""
    if len(sentence) == 0:
        raise InputError("empty sentence")
    words = emb.lookup(list(sentence))
    weights = positional_weights(len(sentence), emb.dim)
    return ad.reduce_sum(ad.mul(words, ad.const(weights)), axis=0)


def pad_sentences(sentences: Sequence[Sequence[int]]) -> np.ndarray:
    M = max(len(s) for s in sentences)
    out = np.zeros((len(sentences), M), dtype=np.int64)
    for i, s in enumerate(sentences):
        out[i, :len(s)] = s
    return out


def encode_story_word_gru_batch(tokens: np.ndarray, emb: EmbeddingTable, cell: GruCell) -> Tensor:
    """Word-level GRU over the story stream ``[..., N, M]`` -> ``[..., N, n_H]``.

    The stream is the sentences laid end to end with padding skipped; fact k
    is the hidden state after the last word of sentence k.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    *lead, N, M = tokens.shape
    stream = tokens.reshape(*lead, N * M)
    words = emb.lookup(stream)
    states = run_gru(cell, words, mask=stream != 0)
    return ad.stack([states[(k + 1) * M - 1] for k in range(N)], axis=-2)


def encode_story_word_gru(sentences: Sequence[Sequence[int]], emb: EmbeddingTable,
                          cell: GruCell) -> list[Tensor]:
    """One GRU pass over all story words; one output per sentence end."""
    if not sentences:
        raise InputError("empty story")
    if any(len(s) == 0 for s in sentences):
        raise InputError("story contains an empty sentence")
    facts = encode_story_word_gru_batch(pad_sentences(sentences), emb, cell)
    return [ad.index(facts, k, axis=0) for k in range(len(sentences))]


def encode_question_batch(tokens: np.ndarray, emb: EmbeddingTable, cell: GruCell) -> Tensor:
    """Final GRU state over padded question tokens ``[..., L]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    words = emb.lookup(tokens)
    states = run_gru(cell, words, mask=tokens != 0)
    return states[-1]


def encode_question(tokens: Sequence[int], emb: EmbeddingTable, cell: GruCell) -> Tensor:
    """q = final hidden state of a GRU over the question words (h0 = 0)."""
    if len(tokens) == 0:
        raise InputError("empty question")
    return encode_question_batch(np.asarray(tokens), emb, cell)
