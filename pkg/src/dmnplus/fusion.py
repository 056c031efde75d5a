"""Bidirectional GRU input fusion layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ShapeError
from .nn import GruCell, run_gru


@dataclass
class FactSequence:
    """Ordered facts ``[..., N, n]`` with an optional validity mask ``[..., N]``.

    Text and image facts share this type; nothing downstream distinguishes them.
    """

    values: Tensor
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim < 2 or self.values.shape[-2] < 1:
            raise InputError(f"a fact sequence needs N >= 1 facts, got shape {self.values.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape[:-1]:
                raise ShapeError(f"fact mask {self.mask.shape} vs facts {self.values.shape}")

    @property
    def N(self) -> int:
        return self.values.shape[-2]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def __len__(self) -> int:
        return self.N

    def fact(self, i: int) -> Tensor:
        return ad.index(self.values, i, axis=-2)

    @classmethod
    def from_list(cls, facts: Sequence[Tensor]) -> FactSequence:
        if not facts:
            raise InputError("empty fact list")
        return cls(ad.stack(list(facts), axis=-2))


@dataclass
class FusionLayer:
    fwd: GruCell
    bwd: GruCell

    def __post_init__(self):
        if (self.fwd.n_in, self.fwd.n_hidden) != (self.bwd.n_in, self.bwd.n_hidden):
            raise ShapeError("forward and backward fusion cells differ in size")

    @classmethod
    def create(cls, n_in: int, n_hidden: int, rng: np.random.Generator) -> FusionLayer:
        return cls(GruCell.create(n_in, n_hidden, rng), GruCell.create(n_in, n_hidden, rng))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.fwd.parameters(prefix + "fwd."), **self.bwd.parameters(prefix + "bwd.")}

    def swapped(self) -> FusionLayer:
        return FusionLayer(self.bwd, self.fwd)


def fuse(layer: FusionLayer, inputs: Tensor | Sequence[Tensor],
         mask: np.ndarray | None = None) -> FactSequence:
    """Sum of forward and backward GRU states at every position.

    ``inputs`` is a list of fact vectors or a tensor ``[..., N, D]``. Both
    directions start from a zero state; masked (padding) positions are skipped.
    """
    if not isinstance(inputs, Tensor):
        if len(inputs) == 0:
            raise InputError("fuse needs at least one input fact")
        dims = {x.shape for x in inputs}
        if len(dims) != 1:
            raise ShapeError(f"fusion inputs have mixed shapes {sorted(dims)}")
        inputs = ad.stack(list(inputs), axis=-2)
    if inputs.ndim < 2 or inputs.shape[-2] == 0:
        raise InputError("fuse needs at least one input fact")
    forward = run_gru(layer.fwd, inputs, mask=mask)
    backward = run_gru(layer.bwd, inputs, mask=mask, reverse=True)
    fused = [ad.add(f, b) for f, b in zip(forward, backward)]
    return FactSequence(ad.stack(fused, axis=-2), mask)
