"""Optimisation, early stopping, evaluation and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .answer import vqa_consensus_accuracy
from .autodiff import Tensor
from .data import Example, build_vocab, truncate_context, validation_split
from .errors import ConfigError, InputError, TrainingFault
from .model import DMN, Batch, ModelConfig, make_batch
from .text import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    max_epochs: int = 256
    patience: int = 20
    l2_strength: float = 1e-5
    dropout_keep_p: float = 0.9
    hidden: int = 80
    passes: int = 3
    seed: int = 0
    sentence_limit: int = 70
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.dropout_keep_p <= 1.0:
            raise ConfigError("dropout_keep_p must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.sentence_limit < 1:
            raise ConfigError("sentence_limit must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingFault(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


_BIAS = re.compile(r"^b(_\w+|\d*)$")


def is_bias(name: str) -> bool:
    return bool(_BIAS.match(name.rsplit(".", 1)[-1]))


def l2_penalty(params: Mapping[str, Tensor], strength: float) -> float:
    """strength * sum of squared weights, biases excluded."""
    return strength * float(sum(np.sum(p.data ** 2) for n, p in params.items() if not is_bias(n)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool
    seed: int
    seconds: float = 0.0

    def losses(self) -> list[tuple[float, float]]:
        return [(r.train_loss, r.val_loss) for r in self.history]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.history:
                fh.write(json.dumps(asdict(r)) + "\n")


def prepare_examples(examples: Sequence[Example], sentence_limit: int) -> list[Example]:
    return [ex if ex.is_visual else truncate_context(ex, sentence_limit) for ex in examples]


def _batches(examples: Sequence[Example], size: int, order: np.ndarray | None = None):
    idx = order if order is not None else np.arange(len(examples))
    for start in range(0, len(idx), size):
        yield [examples[i] for i in idx[start:start + size]]


def _dataset_loss(model: DMN, batches: Sequence[Batch]) -> tuple[float, float]:
    total, correct, count = 0.0, 0, 0
    with ad.no_grad():
        for b in batches:
            loss, out = model.loss(b)
            total += loss.item() * len(b)
            correct += int((np.argmax(out.logits.data, axis=-1) == b.answers).sum())
            count += len(b)
    return total / count, correct / count


def train(model: DMN, examples: Sequence[Example], config: TrainConfig,
          vocab: Vocabulary, answers: Sequence[str],
          val_examples: Sequence[Example] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Mini-batch Adam with early stopping on validation loss.

    When ``val_examples`` is None the last ``val_fraction`` of ``examples``
    is held out. The model is left holding the best-validation parameters.
    """
    if not examples:
        raise InputError("training set is empty")
    examples = prepare_examples(examples, config.sentence_limit)
    if val_examples is None:
        train_set, val_set = validation_split(examples, config.val_fraction)
    else:
        train_set, val_set = list(examples), prepare_examples(val_examples, config.sentence_limit)
    if not train_set:
        raise InputError("no training examples left after the validation split")
    if not val_set:
        val_set = train_set

    answer_index = {a: i for i, a in enumerate(answers)}
    val_set = [ex for ex in val_set if ex.answer in answer_index] or train_set
    grid_cache: dict = {}
    val_batches = [make_batch(chunk, vocab, answers, grid_cache)
                   for chunk in _batches(val_set, config.batch_size)]

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    params = model.parameters()
    adam = AdamState(lr=config.lr)

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_state = np.inf, 0, model.state_dict()
    stale = 0
    stopped_early = False
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for bi, chunk in enumerate(_batches(train_set, config.batch_size, order)):
            batch = make_batch(chunk, vocab, answers, grid_cache)
            ad.zero_grads(params.values())
            loss, _ = model.loss(batch, training=True, rng=rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingFault(f"non-finite loss at epoch {epoch}, batch {bi}")
            ad.backward(loss)
            grads = ad.collect_grads(params)
            for name, p in params.items():
                if config.l2_strength and not is_bias(name):
                    grads[name] = grads[name] + 2.0 * config.l2_strength * p.data
            if "embedding.weight" in grads:
                grads["embedding.weight"][0] = 0.0  # PAD row stays zero
            try:
                adam_step(adam, params, grads)
            except TrainingFault as exc:
                raise TrainingFault(f"{exc} at epoch {epoch}, batch {bi}") from None
            total += value * len(batch)
            count += len(batch)
        val_loss, val_acc = _dataset_loss(model, val_batches)
        record = EpochRecord(epoch, total / count, val_loss, val_acc)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.3f",
                    epoch, record.train_loss, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break
    model.load_state_dict(best_state)
    return TrainReport(history, best_epoch, float(best_loss), best_state, stopped_early,
                       config.seed, time.perf_counter() - t0)


def build_model(model_config: ModelConfig, vocab: Vocabulary, answers: Sequence[str], seed: int) -> DMN:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return DMN(model_config, len(vocab), len(answers), rng)


def train_with_restarts(model_config: ModelConfig, examples: Sequence[Example], config: TrainConfig,
                        restarts: int = 1, vocab: Vocabulary | None = None,
                        answers: Sequence[str] | None = None,
                        val_examples: Sequence[Example] | None = None,
                        on_epoch: Callable[[int, EpochRecord], None] | None = None,
                        ) -> tuple[DMN, TrainReport, Vocabulary, list[str]]:
    """Train ``restarts`` independently seeded models; keep the lowest validation loss."""
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if vocab is None or answers is None:
        vocab, answers = build_vocab(list(examples) + list(val_examples or []))
    model_config = replace(model_config, embed_dim=config.hidden, hidden=config.hidden,
                           passes=config.passes, keep_p=config.dropout_keep_p)
    best = None
    for k in range(restarts):
        cfg = TrainConfig(**{**config.to_dict(), "seed": config.seed + k})
        model = build_model(model_config, vocab, answers, cfg.seed)
        cb = (lambda rec, k=k: on_epoch(k, rec)) if on_epoch else None
        report = train(model, examples, cfg, vocab, answers, val_examples, on_epoch=cb)
        if best is None or report.best_val_loss < best[1].best_val_loss:
            best = (model, report)
    return best[0], best[1], vocab, list(answers)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    predictions: list[str]
    metric: str = "exact"

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy


def predict_examples(model: DMN, examples: Sequence[Example], vocab: Vocabulary,
                     answers: Sequence[str], batch_size: int = 128,
                     sentence_limit: int | None = None) -> list[str]:
    if sentence_limit is not None:
        examples = prepare_examples(examples, sentence_limit)
    preds: list[str] = []
    cache: dict = {}
    with ad.no_grad():
        for chunk in _batches(examples, batch_size):
            out = model.forward(make_batch(chunk, vocab, answers, cache))
            preds.extend(answers[i] for i in np.argmax(out.logits.data, axis=-1))
    return preds


def evaluate(model, examples: Sequence[Example], vocab: Vocabulary | None = None,
             answers: Sequence[str] | None = None, metric: str = "exact",
             batch_size: int = 128, sentence_limit: int | None = None) -> EvalResult:
    """Exact-match accuracy, or mean consensus accuracy for ``metric='vqa_consensus'``.

    ``model`` is a DMN (with ``vocab``/``answers``) or any callable mapping an
    Example to an answer string.
    """
    if not examples:
        raise InputError("cannot evaluate on an empty dataset")
    if isinstance(model, DMN):
        preds = predict_examples(model, examples, vocab, answers, batch_size, sentence_limit)
    else:
        preds = [model(ex) for ex in examples]
    if metric == "exact":
        scores = [float(p == ex.answer) for p, ex in zip(preds, examples)]
    elif metric == "vqa_consensus":
        scores = [vqa_consensus_accuracy(p, ex.human_answers or [ex.answer])
                  for p, ex in zip(preds, examples)]
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    return EvalResult(float(np.mean(scores)), preds, metric)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: DMN, vocab: Vocabulary, answers: Sequence[str],
                    extra: dict | None = None) -> None:
    """numpy .npz archive: every named parameter plus a JSON metadata record."""
    meta = {
        "format": "dmnplus-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_list(),
        "answers": list(answers),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[DMN, Vocabulary, list[str], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != "dmnplus-checkpoint":
            raise ConfigError(f"{path} is not a dmnplus checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    vocab = Vocabulary.from_list(meta["vocab"])
    answers = meta["answers"]
    model = DMN(ModelConfig.from_dict(meta["model_config"]), len(vocab), len(answers),
                np.random.default_rng(0))
    model.load_state_dict(state)
    return model, vocab, answers, meta
