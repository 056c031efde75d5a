"""Command-line entry point: generate, train, eval, gradcheck, gates."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import FAMILIES, TaskSpec, generate_task, load_examples, write_babi
from .episodic import ATTENTION_KINDS, UPDATE_KINDS, WEIGHT_KINDS, write_gate_csv
from .errors import ConfigError, DMNError
from .gradcheck import CheckCase, check_model
from .model import VARIANTS, ModelConfig, make_batch
from .training import (TrainConfig, evaluate, load_checkpoint, prepare_examples, save_checkpoint,
                       train_with_restarts)
from .visual import load_feature_grid, snake_position

log = logging.getLogger("dmnplus")

MANIFEST = "manifest.json"
CHECKPOINT = "model.npz"
REPORT = "report.jsonl"

FAULTABLE_OPS = ("matvec", "add", "sub", "mul", "scale", "sigmoid", "tanh", "relu", "abs",
                 "softmax", "concat", "cross_entropy", "sum", "add_bias", "gate_mul", "index",
                 "stack", "expand", "where", "embed", "reshape")


class UsageError(Exception):
    """Bad flags or paths; reported through argparse with exit status 2."""


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    spec = TaskSpec(args.family, n_entities=args.entities, n_locations=args.locations,
                    n_objects=args.objects, story_length=args.story_length,
                    n_train=args.n, n_test=args.n_test, seed=args.seed)
    train, test = generate_task(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_babi(out / f"{args.family}_train.txt", train)
    write_babi(out / f"{args.family}_test.txt", test)
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _resolve_manifest(args) -> dict:
    if args.manifest:
        path = Path(args.manifest)
        if not path.is_file():
            raise UsageError(f"manifest not found: {path}")
        manifest = json.loads(path.read_text())
        if args.out:
            manifest["output_dir"] = args.out
        return manifest
    if not args.train:
        raise UsageError("train needs --train (or --manifest)")
    if not args.out:
        raise UsageError("train needs --out")
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                     patience=args.patience, l2_strength=args.l2, dropout_keep_p=args.keep_p,
                     hidden=args.hidden, passes=args.passes, seed=args.seed,
                     sentence_limit=args.sentence_limit)
    overrides = dict(embed_dim=args.hidden, hidden=args.hidden, passes=args.passes,
                     keep_p=args.keep_p, use_memory=not args.no_memory)
    train_path = Path(args.train)
    if train_path.suffix == ".jsonl":
        if args.variant == "odmn":
            raise UsageError("odmn reads text with a word GRU; image data needs dmn2, dmn3 or dmn+")
        first = load_examples(train_path)
        if not first:
            raise UsageError(f"no examples in {train_path}")
        overrides.update(input_module="visual",
                         feature_channels=load_feature_grid(first[0].grid).channels)
    model_config = ModelConfig.from_variant(args.variant, **overrides)
    return {
        "version": __version__,
        "variant": args.variant,
        "seed": args.seed,
        "restarts": args.restarts,
        "datasets": {"train": str(train_path), "val": args.val, "test": args.test},
        "model_config": model_config.to_dict(),
        "train_config": tc.to_dict(),
        "output_dir": args.out,
    }


def _read(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    examples = load_examples(p)
    if not examples:
        raise UsageError(f"{what} {p} holds no examples")
    return examples


def run_training(manifest: dict):
    """Train exactly as a resolved manifest describes. Returns (model, report, vocab, answers)."""
    tc = TrainConfig(**manifest["train_config"])
    mc = ModelConfig.from_dict(manifest["model_config"])
    train = _read(manifest["datasets"]["train"], "training set")
    val_path = manifest["datasets"].get("val")
    val = _read(val_path, "validation set") if val_path else None
    return train_with_restarts(mc, train, tc, restarts=manifest["restarts"], val_examples=val,
                               on_epoch=lambda k, r: log.info("restart %d %s", k, r))


def cmd_train(args) -> int:
    manifest = _resolve_manifest(args)
    out = Path(manifest["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    model, report, vocab, answers = run_training(manifest)
    save_checkpoint(out / CHECKPOINT, model, vocab, answers,
                    extra={"variant": manifest["variant"], "seed": report.seed,
                           "best_epoch": report.best_epoch})
    report.write_jsonl(out / REPORT)
    summary = f"best epoch {report.best_epoch}, val loss {report.best_val_loss:.4f}"
    test_path = manifest["datasets"].get("test")
    if test_path:
        result = evaluate(model, _read(test_path, "test set"), vocab, answers,
                          sentence_limit=manifest["train_config"]["sentence_limit"])
        summary += f", test accuracy {result.accuracy:.4f}"
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# eval and gates


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model, vocab, answers, meta = _load_model(args.checkpoint)
    examples = _read(args.data, "dataset")
    result = evaluate(model, examples, vocab, answers, metric=args.metric,
                      sentence_limit=args.sentence_limit)
    metrics = {"metric": result.metric, "accuracy": result.accuracy,
               "error_rate": result.error_rate, "n": len(examples),
               "checkpoint": str(args.checkpoint), "data": str(args.data)}
    text = json.dumps(metrics, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def gate_rows(model, examples, vocab, answers, sentence_limit: int | None = None) -> list[dict]:
    """One row per (example, pass, fact) with the attention gate value."""
    if not model.config.use_memory:
        raise ConfigError("model was trained without episodic memory; it has no gates")
    if sentence_limit:
        examples = prepare_examples(examples, sentence_limit)
    rows = []
    cache: dict = {}
    with ad.no_grad():
        for start in range(0, len(examples), 64):
            chunk = examples[start:start + 64]
            batch = make_batch(chunk, vocab, answers, cache)
            episodes = model.forward(batch).episodes
            for b, ex in enumerate(chunk):
                n_facts = int(batch.fact_mask[b].sum())
                for t, g in enumerate(episodes.gates, start=1):
                    for i in range(n_facts):
                        row = {"example_id": start + b, "pass": t, "fact_index": i,
                               "gate": repr(float(g.data[b, i]))}
                        if ex.is_visual:
                            H, W = batch.grid_shapes[b]
                            row["row"], row["col"] = snake_position(i, H, W)
                        rows.append(row)
    return rows


def cmd_gates(args) -> int:
    model, vocab, answers, _ = _load_model(args.checkpoint)
    examples = _read(args.data, "dataset")
    if args.limit:
        examples = examples[:args.limit]
    rows = gate_rows(model, examples, vocab, answers, args.sentence_limit)
    write_gate_csv(args.out, rows)
    print(f"wrote {len(rows)} gate rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cases = [CheckCase(m, a, u, w) for m in args.input_module for a in args.attention
             for u in args.update for w in args.weights]
    results = []
    fault = (ad.inject_gradient_fault(args.corrupt_op, args.corrupt_factor) if args.corrupt_op
             else contextlib.nullcontext())
    with fault:
        for case in cases:
            report = check_model(case, hidden=args.hidden, passes=args.passes, seed=args.seed,
                                 eps=args.eps, tol=args.tol)
            results.append((case, report))
            print(f"{case.label}: {report.summary()}")
    if args.out:
        records = [{"case": c.label, **{k: v for k, v in asdict(r).items() if k != "per_param"},
                    "per_param": r.per_param} for c, r in results]
        Path(args.out).write_text(json.dumps(records, indent=2, default=_jsonable) + "\n")
    failed = [c.label for c, r in results if not r.passed]
    worst_case, worst = max(results, key=lambda cr: cr[1].max_rel_error)
    print(f"worst parameter: {worst.worst_param} in {worst_case.label} "
          f"(relative error {worst.max_rel_error:.3e})")
    if failed:
        sys.stdout.flush()
        print(f"error: gradient check failed for {len(failed)} of {len(results)} configurations",
              file=sys.stderr)
        return 1
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serialisable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmnplus", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic task in bAbI format")
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--n", type=int, default=1000, help="training examples")
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, default=4)
    g.add_argument("--locations", type=int, default=6)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--story-length", type=int, default=8)
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model variant")
    t.add_argument("--train", help="bAbI text file or image-QA .jsonl")
    t.add_argument("--val", help="explicit validation file (default: last 10%% of --train)")
    t.add_argument("--test", help="optional test file scored after training")
    t.add_argument("--out", help="output directory for manifest, checkpoint and report")
    t.add_argument("--manifest", help="re-run exactly from a previously written manifest")
    t.add_argument("--variant", choices=sorted(VARIANTS), default="dmn+")
    t.add_argument("--no-memory", action="store_true",
                   help="ablation: the answer head reads [q; q] instead of [q; m_T]")
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--hidden", type=int, default=80, help="hidden and embedding size d")
    t.add_argument("--passes", type=int, default=3)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--keep-p", type=float, default=0.9, help="dropout keep probability")
    t.add_argument("--l2", type=float, default=1e-5)
    t.add_argument("--max-epochs", type=int, default=256)
    t.add_argument("--sentence-limit", type=int, default=70)
    t.add_argument("--restarts", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=("exact", "vqa_consensus"), default="exact")
    e.add_argument("--sentence-limit", type=int, default=70)
    e.add_argument("--out", help="metrics JSON file")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("--input-module", nargs="+", choices=("word_gru", "fusion", "visual"),
                   default=["word_gru", "fusion", "visual"])
    c.add_argument("--attention", nargs="+", choices=ATTENTION_KINDS, default=list(ATTENTION_KINDS))
    c.add_argument("--update", nargs="+", choices=UPDATE_KINDS, default=list(UPDATE_KINDS))
    c.add_argument("--weights", nargs="+", choices=WEIGHT_KINDS, default=list(WEIGHT_KINDS))
    c.add_argument("--hidden", type=int, default=4)
    c.add_argument("--passes", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--corrupt-op", choices=FAULTABLE_OPS,
                   help="debug: scale this op's backward pass to confirm the check fails")
    c.add_argument("--corrupt-factor", type=float, default=2.0)
    c.add_argument("--out", help="JSON report")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gates", help="dump attention gates as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, help="only the first N examples")
    s.add_argument("--sentence-limit", type=int, default=70)
    s.set_defaults(func=cmd_gates)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DMNError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
