"""Answer head and answer-level metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import ParamBundle, init_weights, param


@dataclass
class AnswerHead(ParamBundle):
    """Linear layer over a = [q; m_T]."""

    W_a: Tensor  # |V_ans| x 2 n_H
    b_a: Tensor

    @classmethod
    def create(cls, n_hidden: int, n_answers: int, rng: np.random.Generator) -> AnswerHead:
        return cls(param(init_weights("xavier_uniform", (n_answers, 2 * n_hidden), rng), "W_a"),
                   param(np.zeros(n_answers), "b_a"))

    @property
    def n_answers(self) -> int:
        return self.W_a.shape[0]

    def logits(self, a: Tensor) -> Tensor:
        if a.shape[-1] != self.W_a.shape[1]:
            raise ShapeError(f"answer input has size {a.shape[-1]}, head expects {self.W_a.shape[1]}")
        return ad.add_bias(ad.matvec(self.W_a, a), self.b_a)


def predict(head: AnswerHead, q: Tensor, m_T: Tensor) -> tuple[Tensor, np.ndarray]:
    """Logits W_a [q; m_T] + b_a and their argmax (ties go to the lowest index)."""
    if q.shape != m_T.shape:
        raise ShapeError(f"q{q.shape} and m_T{m_T.shape} differ")
    logits = head.logits(ad.concat([q, m_T], axis=-1))
    return logits, np.argmax(logits.data, axis=-1)


def vqa_consensus_accuracy(predicted: str, human_answers: Sequence[str]) -> float:
    """min(#humans giving exactly ``predicted`` / 3, 1)."""
    if len(human_answers) == 0:
        raise ValueError("human answer multiset is empty")
    return min(Counter(human_answers)[predicted] / 3.0, 1.0)


def mean_vqa_accuracy(pairs: Iterable[tuple[str, Sequence[str]]]) -> float:
    scores = [vqa_consensus_accuracy(p, h) for p, h in pairs]
    if not scores:
        raise ValueError("no questions to score")
    return float(np.mean(scores))
