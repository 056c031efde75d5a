"""The assembled question-answering network and its variant presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .answer import AnswerHead
from .autodiff import Tensor
from .data import Example
from .episodic import EpisodeState, EpisodicConfig, EpisodicMemory
from .errors import ConfigError, InputError
from .fusion import FactSequence, FusionLayer, fuse
from .nn import GruCell, apply_dropout
from .text import EmbeddingTable, Vocabulary, encode_question_batch, encode_sentences_pe, \
    encode_story_word_gru_batch
from .visual import FeatureGrid, VisualProjection, load_feature_grid, project_patches

INPUT_MODULES = ("word_gru", "fusion", "visual")

# Preset architectures: input module, attention, memory update, weight tying.
VARIANTS = {
    "odmn": dict(input_module="word_gru", attention="soft", update="gru", weights="tied"),
    "dmn2": dict(input_module="fusion", attention="soft", update="gru", weights="tied"),
    "dmn3": dict(input_module="fusion", attention="attn_gru", update="gru", weights="tied"),
    "dmn+": dict(input_module="fusion", attention="attn_gru", update="relu", weights="untied"),
}


@dataclass(frozen=True)
class ModelConfig:
    input_module: str = "fusion"
    embed_dim: int = 80
    hidden: int = 80
    attn_hidden: int | None = None
    passes: int = 3
    attention: str = "attn_gru"
    update: str = "relu"
    weights: str = "untied"
    keep_p: float = 0.9
    use_memory: bool = True
    feature_channels: int | None = None

    def __post_init__(self):
        if self.input_module not in INPUT_MODULES:
            raise ConfigError(f"input_module must be one of {INPUT_MODULES}, got {self.input_module!r}")
        if self.input_module == "visual" and not self.feature_channels:
            raise ConfigError("visual input needs feature_channels")
        if not 0.0 < self.keep_p <= 1.0:
            raise ConfigError(f"keep_p must lie in (0, 1], got {self.keep_p}")
        self.episodic  # validates the episodic switches

    @property
    def episodic(self) -> EpisodicConfig:
        return EpisodicConfig(self.passes, self.attention, self.update, self.weights)

    @classmethod
    def from_variant(cls, name: str, **overrides) -> ModelConfig:
        try:
            preset = VARIANTS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(**{**preset, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass
class Batch:
    """Padded arrays for a group of examples.

    ``story`` is ``[B, N, M]`` word ids (0 = PAD) for text input; ``patches``
    is ``[B, N, C]`` snake-ordered features for image input.
    """

    question: np.ndarray
    answers: np.ndarray
    fact_mask: np.ndarray
    story: np.ndarray | None = None
    patches: np.ndarray | None = None
    grid_shapes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.question.shape[0]


def _pad_2d(rows: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def make_batch(examples: Sequence[Example], vocab: Vocabulary, answers: Sequence[str],
               grid_cache: dict | None = None) -> Batch:
    """Encode and pad examples. Unknown answers get label -1 (never predicted)."""
    if not examples:
        raise InputError("empty batch")
    answer_index = {a: i for i, a in enumerate(answers)}
    question = _pad_2d([vocab.encode(ex.question) or [1] for ex in examples])
    labels = np.array([answer_index.get(ex.answer, -1) for ex in examples], dtype=np.int64)
    if examples[0].is_visual:
        grids = []
        for ex in examples:
            g = ex.grid
            if not isinstance(g, FeatureGrid):
                key = str(g)
                if grid_cache is not None and key in grid_cache:
                    g = grid_cache[key]
                else:
                    g = load_feature_grid(key)
                    if grid_cache is not None:
                        grid_cache[key] = g
            grids.append(g)
        N = max(g.height * g.width for g in grids)
        C = grids[0].channels
        patches = np.zeros((len(grids), N, C))
        mask = np.zeros((len(grids), N), dtype=bool)
        for i, g in enumerate(grids):
            n = g.height * g.width
            patches[i, :n] = g.patches()
            mask[i, :n] = True
        return Batch(question, labels, mask, patches=patches,
                     grid_shapes=[(g.height, g.width) for g in grids])
    if any(not ex.context for ex in examples):
        raise InputError("example with empty context")
    N = max(len(ex.context) for ex in examples)
    M = max(len(s) for ex in examples for s in ex.context)
    story = np.zeros((len(examples), N, M), dtype=np.int64)
    mask = np.zeros((len(examples), N), dtype=bool)
    for i, ex in enumerate(examples):
        for k, sent in enumerate(ex.context):
            ids = vocab.encode(sent)
            story[i, k, :len(ids)] = ids
        mask[i, :len(ex.context)] = True
    return Batch(question, labels, mask, story=story)


@dataclass
class ForwardResult:
    logits: Tensor
    q: Tensor
    facts: FactSequence
    episodes: EpisodeState | None


class DMN:
    """Input module -> question module -> episodic memory -> answer head."""

    def __init__(self, config: ModelConfig, vocab_size: int, n_answers: int,
                 rng: np.random.Generator):
        self.config = config
        D, H = config.embed_dim, config.hidden
        self.embedding = EmbeddingTable.create(vocab_size, D, rng)
        self.question_gru = GruCell.create(D, H, rng)
        self.reader: GruCell | None = None
        self.fusion: FusionLayer | None = None
        self.projection: VisualProjection | None = None
        if config.input_module == "word_gru":
            self.reader = GruCell.create(D, H, rng)
        else:
            if config.input_module == "visual":
                self.projection = VisualProjection.create(config.feature_channels, D, rng)
            self.fusion = FusionLayer.create(D, H, rng)
        self.memory = EpisodicMemory.create(config.episodic, H, rng, config.attn_hidden)
        self.head = AnswerHead.create(H, n_answers, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.embedding.parameters("embedding."))
        out.update(self.question_gru.parameters("question_gru."))
        if self.reader is not None:
            out.update(self.reader.parameters("reader."))
        if self.projection is not None:
            out.update(self.projection.parameters("projection."))
        if self.fusion is not None:
            out.update(self.fusion.parameters("fusion."))
        out.update(self.memory.parameters("memory."))
        out.update(self.head.parameters("head."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"parameter {k} has shape {state[k].shape}, expected {p.shape}")
            p.data[...] = state[k]

    def encode_facts(self, batch: Batch, training: bool = False,
                     rng: np.random.Generator | None = None) -> FactSequence:
        cfg = self.config
        if cfg.input_module == "visual":
            if batch.patches is None:
                raise InputError("visual model given a text batch")
            raw = apply_dropout(ad.const(batch.patches), cfg.keep_p, rng, training)
            return fuse(self.fusion, project_patches(raw, self.projection), batch.fact_mask)
        if batch.story is None:
            raise InputError("text model given an image batch")
        if cfg.input_module == "word_gru":
            facts = encode_story_word_gru_batch(batch.story, self.embedding, self.reader)
            facts = apply_dropout(facts, cfg.keep_p, rng, training)
            return FactSequence(facts, batch.fact_mask)
        sentences = encode_sentences_pe(batch.story, self.embedding)
        sentences = apply_dropout(sentences, cfg.keep_p, rng, training)
        return fuse(self.fusion, sentences, batch.fact_mask)

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        q = encode_question_batch(batch.question, self.embedding, self.question_gru)
        facts = self.encode_facts(batch, training, rng)
        episodes = None
        if self.config.use_memory:
            episodes = self.memory.run(facts, q)
            a = ad.concat([q, episodes.final_memory], axis=-1)
        else:
            a = ad.concat([q, q], axis=-1)
        a = apply_dropout(a, self.config.keep_p, rng, training)
        return ForwardResult(self.head.logits(a), q, facts, episodes)

    def loss(self, batch: Batch, training: bool = False,
             rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardResult]:
        if (batch.answers < 0).any():
            raise InputError("batch contains answers outside the answer vocabulary")
        out = self.forward(batch, training, rng)
        return ad.cross_entropy(out.logits, batch.answers), out
