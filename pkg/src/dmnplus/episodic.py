"""Multi-pass episodic memory: attention gates, context extraction, memory update."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .fusion import FactSequence
from .nn import GruCell, ParamBundle, gru_step, init_weights, param, zeros_state

ATTENTION_KINDS = ("soft", "attn_gru")
UPDATE_KINDS = ("gru", "relu")
WEIGHT_KINDS = ("tied", "untied")


@dataclass(frozen=True)
class EpisodicConfig:
    passes: int = 3
    attention: str = "attn_gru"
    update: str = "relu"
    weights: str = "untied"

    def __post_init__(self):
        if self.passes < 1:
            raise ConfigError(f"passes must be >= 1, got {self.passes}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.update not in UPDATE_KINDS:
            raise ConfigError(f"update must be one of {UPDATE_KINDS}, got {self.update!r}")
        if self.weights not in WEIGHT_KINDS:
            raise ConfigError(f"weights must be one of {WEIGHT_KINDS}, got {self.weights!r}")

    @property
    def n_param_sets(self) -> int:
        return self.passes if self.weights == "untied" else 1


@dataclass
class AttentionScorer(ParamBundle):
    """Two-layer scorer ``W2 tanh(W1 z + b1) + b2`` over interaction vectors."""

    W1: Tensor  # n_A x 4 n_H
    b1: Tensor
    W2: Tensor  # 1 x n_A
    b2: Tensor  # length 1

    @classmethod
    def create(cls, n_hidden: int, n_attn: int, rng: np.random.Generator) -> AttentionScorer:
        return cls(param(init_weights("xavier_uniform", (n_attn, 4 * n_hidden), rng), "W1"),
                   param(np.zeros(n_attn), "b1"),
                   param(init_weights("xavier_uniform", (1, n_attn), rng), "W2"),
                   param(np.zeros(1), "b2"))

    def score(self, z: Tensor) -> Tensor:
        hidden = ad.tanh(ad.add_bias(ad.matvec(self.W1, z), self.b1))
        out = ad.add_bias(ad.matvec(self.W2, hidden), self.b2)
        return ad.index(out, 0, axis=-1)


@dataclass
class ReluUpdate(ParamBundle):
    """``m_t = relu(W [m_prev; c; q] + b)`` with W of shape n_H x 3 n_H."""

    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, n_hidden: int, rng: np.random.Generator) -> ReluUpdate:
        return cls(param(init_weights("xavier_uniform", (n_hidden, 3 * n_hidden), rng), "W"),
                   param(np.zeros(n_hidden), "b"))


def interaction_vector(f: Tensor, q: Tensor, m: Tensor) -> Tensor:
    """[f*q; f*m; |f-q|; |f-m|]."""
    if not (f.shape == q.shape == m.shape):
        raise ShapeError(f"interaction_vector shape mismatch f{f.shape} q{q.shape} m{m.shape}")
    return ad.concat([ad.mul(f, q), ad.mul(f, m),
                      ad.absolute(ad.sub(f, q)), ad.absolute(ad.sub(f, m))], axis=-1)


def attention_gates(scorer: AttentionScorer, facts: FactSequence, q: Tensor, m: Tensor) -> Tensor:
    """Softmax over the N fact scores -> gates ``[..., N]``."""
    F = facts.values
    N = facts.N
    Q = ad.expand(q, N, axis=-2)
    Mm = ad.expand(m, N, axis=-2)
    scores = scorer.score(interaction_vector(F, Q, Mm))
    return ad.softmax(scores, mask=facts.mask)


def _check_gates(facts: FactSequence, g: Tensor) -> None:
    if g.shape != facts.values.shape[:-1]:
        raise ShapeError(f"gate shape {g.shape} does not match {facts.N} facts {facts.values.shape}")


def soft_attention(facts: FactSequence, g: Tensor) -> Tensor:
    """c = sum_i g_i f_i."""
    _check_gates(facts, g)
    return ad.reduce_sum(ad.gate_mul(g, facts.values), axis=-2)


def attention_gru(cell: GruCell, facts: FactSequence, g: Tensor) -> Tensor:
    """GRU whose update gate is the scalar attention gate; returns the final state.

    h_i = g_i * h_tilde_i + (1 - g_i) * h_{i-1}, starting from h_0 = 0. The
    reset gate and candidate follow the ordinary GRU.
    """
    _check_gates(facts, g)
    proj = cell.project_inputs(facts.values)
    h = zeros_state(facts.values.shape[:-2], cell.n_hidden)
    for i in range(facts.N):
        h_tilde = cell.candidate(ad.index(proj["r"], i, axis=-2), ad.index(proj["c"], i, axis=-2), h)
        g_i = ad.index(g, i, axis=-1)
        h = ad.add(h, ad.gate_mul(g_i, ad.sub(h_tilde, h)))
    return h


def _pass_params(params: Sequence, t: int, what: str):
    """Parameters for 1-based pass ``t``: a single shared set or one per pass."""
    if len(params) == 1:
        return params[0]
    if not 1 <= t <= len(params):
        raise ConfigError(f"no {what} parameters for pass {t} (have {len(params)})")
    return params[t - 1]


def memory_update(kind: str, params, m_prev: Tensor, c: Tensor, q: Tensor, t: int = 1) -> Tensor:
    """GRU(c, m_prev) or relu(W_t [m_prev; c; q] + b_t).

    ``params`` is one parameter set (GruCell / ReluUpdate) or a per-pass list.
    """
    if not isinstance(params, (list, tuple)):
        params = [params]
    if not params:
        raise ConfigError("no memory-update parameters")
    p = _pass_params(params, t, "memory-update")
    if kind == "gru":
        if not isinstance(p, GruCell):
            raise ConfigError("gru memory update needs GruCell parameters")
        return gru_step(p, c, m_prev)
    if kind == "relu":
        if not isinstance(p, ReluUpdate):
            raise ConfigError("relu memory update needs ReluUpdate parameters")
        return ad.relu(ad.add_bias(ad.matvec(p.W, ad.concat([m_prev, c, q], axis=-1)), p.b))
    raise ConfigError(f"unknown memory update kind {kind!r}")


@dataclass
class EpisodeState:
    """History of one episodic run. ``memories[0]`` is q."""

    memories: list[Tensor] = field(default_factory=list)
    gates: list[Tensor] = field(default_factory=list)
    contexts: list[Tensor] = field(default_factory=list)

    @property
    def final_memory(self) -> Tensor:
        return self.memories[-1]


@dataclass
class EpisodicMemory:
    """Per-pass (untied) or shared (tied) episodic parameters plus their config."""

    config: EpisodicConfig
    scorers: list[AttentionScorer]
    attn_cells: list[GruCell]  # empty for soft attention
    updates: list  # GruCell or ReluUpdate

    @classmethod
    def create(cls, config: EpisodicConfig, n_hidden: int, rng: np.random.Generator,
               n_attn: int | None = None) -> EpisodicMemory:
        n_attn = n_attn or n_hidden
        k = config.n_param_sets
        scorers = [AttentionScorer.create(n_hidden, n_attn, rng) for _ in range(k)]
        cells = ([GruCell.create(n_hidden, n_hidden, rng, update_gate=False) for _ in range(k)]
                 if config.attention == "attn_gru" else [])
        if config.update == "gru":
            updates = [GruCell.create(n_hidden, n_hidden, rng) for _ in range(k)]
        else:
            updates = [ReluUpdate.create(n_hidden, rng) for _ in range(k)]
        return cls(config, scorers, cells, updates)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group, items in (("scorer", self.scorers), ("attn_gru", self.attn_cells),
                             ("update", self.updates)):
            for i, item in enumerate(items):
                out.update(item.parameters(f"{prefix}{group}{i}."))
        return out

    def run(self, facts: FactSequence, q: Tensor) -> EpisodeState:
        return run_episodes(self.config, self.scorers, self.attn_cells, self.updates, facts, q)


def run_episodes(config: EpisodicConfig, scorers: Sequence[AttentionScorer],
                 attn_cells: Sequence[GruCell], updates: Sequence, facts: FactSequence,
                 q: Tensor) -> EpisodeState:
    """T passes of gate -> context -> memory update, starting from m0 = q."""
    if q.shape[-1] != facts.dim:
        raise ShapeError(f"question size {q.shape[-1]} vs fact size {facts.dim}")
    if config.attention == "attn_gru" and not attn_cells:
        raise ConfigError("attention-GRU configuration has no attention cells")
    state = EpisodeState(memories=[q])
    m = q
    for t in range(1, config.passes + 1):
        g = attention_gates(_pass_params(scorers, t, "scorer"), facts, q, m)
        if config.attention == "soft":
            c = soft_attention(facts, g)
        else:
            c = attention_gru(_pass_params(attn_cells, t, "attention-GRU"), facts, g)
        m = memory_update(config.update, list(updates), m, c, q, t)
        state.gates.append(g)
        state.contexts.append(c)
        state.memories.append(m)
    return state


def write_gate_csv(path, rows: Sequence[dict]) -> None:
    """Gate dump with one row per (example, pass, fact)."""
    if not rows:
        raise ValueError("no gate rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
