"""Shared layers: weight initialisation, dropout and the GRU cell."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

SQRT3 = float(np.sqrt(3.0))


def init_weights(kind: str, shape: tuple[int, ...], rng: np.random.Generator,
                 low: float = -SQRT3, high: float = SQRT3) -> np.ndarray:
    """Draw an initial parameter array.

    ``xavier_uniform`` samples U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    where fan_out is the row count and fan_in the column count. ``uniform``
    samples U(low, high); the defaults are the word-embedding range. ``zeros``
    is used for biases.
    """
    if any(s < 1 for s in shape):
        raise ShapeError(f"init_weights needs positive dimensions, got {shape}")
    if kind == "xavier_uniform":
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "uniform":
        return rng.uniform(low, high, size=shape)
    if kind == "zeros":
        return np.zeros(shape)
    raise ValueError(f"unknown init kind {kind!r}")


def param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def apply_dropout(x: Tensor, keep_p: float, rng: np.random.Generator | None,
                  training: bool) -> Tensor:
    """Inverted dropout: keep each entry with probability ``keep_p`` and rescale."""
    if not 0.0 < keep_p <= 1.0:
        raise ValueError(f"keep_p must lie in (0, 1], got {keep_p}")
    if not training or keep_p == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_p) / keep_p
    return ad.mul(x, ad.const(mask))


class ParamBundle:
    """Mixin for dataclasses whose Tensor fields are trainable parameters."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[prefix + f.name] = value
        return out


@dataclass
class GruCell(ParamBundle):
    """Standard GRU parameters.

    ``W_*`` are n_H x n_I, ``U_*`` are n_H x n_H, ``b_*`` have length n_H.
    Cells built with ``update_gate=False`` carry no update-gate parameters;
    the attention-based GRU supplies its own scalar gate instead.
    """

    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_c: Tensor
    U_c: Tensor
    b_c: Tensor
    W_u: Tensor | None = None
    U_u: Tensor | None = None
    b_u: Tensor | None = None

    @classmethod
    def create(cls, n_in: int, n_hidden: int, rng: np.random.Generator,
               update_gate: bool = True) -> GruCell:
        def w(shape, name):
            return param(init_weights("xavier_uniform", shape, rng), name)

        def b(name):
            return param(np.zeros(n_hidden), name)

        kw = {}
        for gate in ("r", "c") + (("u",) if update_gate else ()):
            kw[f"W_{gate}"] = w((n_hidden, n_in), f"W_{gate}")
            kw[f"U_{gate}"] = w((n_hidden, n_hidden), f"U_{gate}")
            kw[f"b_{gate}"] = b(f"b_{gate}")
        return cls(**kw)

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int, update_gate: bool = True) -> GruCell:
        kw = {}
        for gate in ("r", "c") + (("u",) if update_gate else ()):
            kw[f"W_{gate}"] = param(np.zeros((n_hidden, n_in)), f"W_{gate}")
            kw[f"U_{gate}"] = param(np.zeros((n_hidden, n_hidden)), f"U_{gate}")
            kw[f"b_{gate}"] = param(np.zeros(n_hidden), f"b_{gate}")
        return cls(**kw)

    @property
    def n_in(self) -> int:
        return self.W_r.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W_r.shape[0]

    @property
    def has_update_gate(self) -> bool:
        return self.W_u is not None

    def project_inputs(self, x: Tensor) -> dict[str, Tensor]:
        """Input-side terms ``W x + b`` for each gate; ``x`` may carry a time axis."""
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"GRU input has size {x.shape[-1]}, cell expects {self.n_in}")
        gates = ("u", "r", "c") if self.has_update_gate else ("r", "c")
        return {g: ad.add_bias(ad.matvec(getattr(self, f"W_{g}"), x), getattr(self, f"b_{g}"))
                for g in gates}

    def candidate(self, xr: Tensor, xc: Tensor, h_prev: Tensor) -> Tensor:
        r = ad.sigmoid(ad.add(xr, ad.matvec(self.U_r, h_prev)))
        return ad.tanh(ad.add(xc, ad.mul(r, ad.matvec(self.U_c, h_prev))))

    def step_projected(self, proj: dict[str, Tensor], h_prev: Tensor) -> Tensor:
        u = ad.sigmoid(ad.add(proj["u"], ad.matvec(self.U_u, h_prev)))
        h_tilde = self.candidate(proj["r"], proj["c"], h_prev)
        # u * h_tilde + (1 - u) * h_prev
        return ad.add(h_prev, ad.mul(u, ad.sub(h_tilde, h_prev)))


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update ``h = u * h_tilde + (1 - u) * h_prev``."""
    if not cell.has_update_gate:
        raise ShapeError("gru_step needs a cell with an update gate")
    if h_prev.shape[-1] != cell.n_hidden:
        raise ShapeError(f"hidden state has size {h_prev.shape[-1]}, cell expects {cell.n_hidden}")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"gru_step leading shapes differ: x{x.shape} h{h_prev.shape}")
    return cell.step_projected(cell.project_inputs(x), h_prev)


def zeros_state(lead: tuple[int, ...], n: int) -> Tensor:
    return ad.const(np.zeros(lead + (n,)))


def run_gru(cell: GruCell, xs: Tensor, mask: np.ndarray | None = None,
            h0: Tensor | None = None, reverse: bool = False) -> list[Tensor]:
    """Run ``cell`` over the time axis (second to last) of ``xs``.

    Returns the hidden state after every position, in position order. Where
    ``mask`` (shape ``xs.shape[:-1]``) is False the state is carried through
    unchanged, which lets padded sequences share one batch.
    """
    if xs.ndim < 2:
        raise ShapeError(f"run_gru expects [..., L, n_I], got {xs.shape}")
    L = xs.shape[-2]
    lead = xs.shape[:-2]
    proj = cell.project_inputs(xs)
    h = h0 if h0 is not None else zeros_state(lead, cell.n_hidden)
    out: list[Tensor | None] = [None] * L
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        p_t = {g: ad.index(v, t, axis=-2) for g, v in proj.items()}
        h_new = cell.step_projected(p_t, h)
        if mask is not None and not mask[..., t].all():
            h_new = ad.where(mask[..., t, None], h_new, h)
        h = h_new
        out[t] = h
    return out
