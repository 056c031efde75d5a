"""Finite-difference checks of the full model on tiny fixed examples."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, grad_check
from .data import Example, build_vocab
from .episodic import ATTENTION_KINDS, UPDATE_KINDS, WEIGHT_KINDS
from .model import DMN, ModelConfig, make_batch
from .visual import FeatureGrid

EPISODIC_COMBOS = list(itertools.product(ATTENTION_KINDS, UPDATE_KINDS, WEIGHT_KINDS))

TEXT_EXAMPLE = Example(
    context=[["mary", "moved", "to", "the", "bathroom"],
             ["john", "went", "to", "the", "hallway"],
             ["mary", "got", "the", "football"]],
    question=["where", "is", "the", "football"],
    answer="bathroom",
)


def visual_example(rng: np.random.Generator, channels: int = 3) -> Example:
    """A 2 x 2 grid, i.e. four facts."""
    return Example(context=[], question=["what", "is", "here"], answer="cat",
                   grid=FeatureGrid(rng.normal(size=(2, 2, channels))))


@dataclass
class CheckCase:
    input_module: str
    attention: str
    update: str
    weights: str

    @property
    def label(self) -> str:
        return f"{self.input_module}/{self.attention}/{self.update}/{self.weights}"


def all_cases(input_modules=("word_gru", "fusion", "visual")) -> list[CheckCase]:
    return [CheckCase(m, *combo) for m in input_modules for combo in EPISODIC_COMBOS]


def check_model(case: CheckCase, hidden: int = 4, passes: int = 3, seed: int = 0,
                eps: float = 1e-5, tol: float = 1e-4,
                example: Example | None = None) -> GradCheckReport:
    """Gradient check of the cross-entropy loss w.r.t. every model parameter.

    Dropout is disabled and everything runs in float64.
    """
    rng = np.random.default_rng(seed)
    channels = 3
    if case.input_module == "visual":
        example = visual_example(rng, channels)
        answers = ["cat", "dog"]
        vocab, _ = build_vocab([Example([["x"]], example.question, "cat")])
    else:
        example = example or TEXT_EXAMPLE
        vocab, answers = build_vocab([example])
        answers = sorted(set(answers) | {"bathroom", "hallway"})
    cfg = ModelConfig(input_module=case.input_module, embed_dim=hidden, hidden=hidden,
                      passes=passes, attention=case.attention, update=case.update,
                      weights=case.weights, keep_p=1.0,
                      feature_channels=channels if case.input_module == "visual" else None)
    model = DMN(cfg, len(vocab), len(answers), rng)
    # small nonzero biases so bias gradients are exercised away from symmetric points
    for name, p in model.parameters().items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    batch = make_batch([example], vocab, answers)
    params = model.parameters()
    return grad_check(lambda: model.loss(batch)[0], params, eps=eps, tol=tol)
