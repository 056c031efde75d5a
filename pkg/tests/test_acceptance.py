"""Acceptance gate. Each test prints one PASS/FAIL line for its criterion.

The desk-scale learning runs take several minutes in total on one core.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from dmnplus import autodiff as ad
from dmnplus.answer import vqa_consensus_accuracy
from dmnplus.cli import main
from dmnplus.data import TaskSpec, build_vocab, format_babi, generate_task, read_babi
from dmnplus.episodic import AttentionScorer, attention_gates, attention_gru, soft_attention
from dmnplus.errors import FormatError
from dmnplus.fusion import FactSequence, FusionLayer, fuse
from dmnplus.model import DMN, ModelConfig, make_batch
from dmnplus.nn import GruCell
from dmnplus.visual import load_feature_grid

from conftest import FIXTURES

RESULTS: list[str] = []

# desk-scale settings shared by the learning criteria
DESK = ["--hidden", "32", "--passes", "3", "--batch-size", "32", "--seed", "0"]
TWO_FACT = ["--family", "two_fact", "--entities", "2", "--objects", "2", "--locations", "4",
            "--story-length", "6", "--n", "3000", "--n-test", "200", "--seed", "7"]
TWO_FACT_EPOCHS = "30"


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)


def cli(*argv) -> int:
    return main([str(a) for a in argv])


def train_and_score(train, test, out, *flags) -> dict:
    t0 = time.perf_counter()
    assert cli("train", "--train", train, "--out", out, *DESK, *flags) == 0
    seconds = time.perf_counter() - t0
    metrics = out / "metrics.json"
    assert cli("eval", "--checkpoint", out / "model.npz", "--data", test, "--out", metrics) == 0
    history = [json.loads(l) for l in (out / "report.jsonl").read_text().splitlines()]
    return {"accuracy": json.loads(metrics.read_text())["accuracy"], "seconds": seconds,
            "epochs": len(history), "history": history}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def test_criterion_1_gradient_fidelity(workdir):
    out = workdir / "gradcheck.json"
    t0 = time.perf_counter()
    code = cli("gradcheck", "--input-module", "fusion", "visual", "--eps", "1e-5", "--tol", "1e-4",
               "--out", out)
    seconds = time.perf_counter() - t0
    records = json.loads(out.read_text())
    worst = max(r["max_rel_error"] for r in records)
    ok = code == 0 and len(records) == 16 and worst < 1e-4 and seconds < 60
    report(1, ok, f"{len(records)} configs, max relative error {worst:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_2_gate_invariants(workdir):
    rng = np.random.default_rng(0)
    examples, _ = generate_task(TaskSpec("two_fact", n_train=100, n_test=0, seed=21))
    vocab, answers = build_vocab(examples)
    worst_sum = 0.0
    for variant in ("dmn2", "dmn+"):
        model = DMN(ModelConfig.from_variant(variant, embed_dim=8, hidden=8), len(vocab), len(answers), rng)
        with ad.no_grad():
            gates = model.forward(make_batch(examples, vocab, answers)).episodes.gates
        for g in gates:
            worst_sum = max(worst_sum, float(np.abs(g.data.sum(axis=-1) - 1).max()))

    soft_max_diff, varied = 0.0, 0
    for _ in range(100):
        n, d = int(rng.integers(3, 9)), int(rng.integers(2, 7))
        facts = rng.normal(size=(n, d))
        scorer = AttentionScorer.create(d, d, rng)
        g = attention_gates(scorer, FactSequence(ad.const(facts)), ad.const(rng.normal(size=d)),
                            ad.const(rng.normal(size=d))).data
        worst_sum = max(worst_sum, abs(g.sum() - 1))
        perm = rng.permutation(n)
        while np.array_equal(perm, np.arange(n)):
            perm = rng.permutation(n)
        a = soft_attention(FactSequence(ad.const(facts)), ad.const(g)).data
        b = soft_attention(FactSequence(ad.const(facts[perm])), ad.const(g[perm])).data
        soft_max_diff = max(soft_max_diff, float(np.abs(a - b).max()))
        cell = GruCell.create(d, d, rng, update_gate=False)
        a = attention_gru(cell, FactSequence(ad.const(facts)), ad.const(g)).data
        b = attention_gru(cell, FactSequence(ad.const(facts[perm])), ad.const(g[perm])).data
        varied += not np.allclose(a, b, rtol=1e-9, atol=1e-12)
    ok = worst_sum <= 1e-6 and soft_max_diff < 1e-12 and varied >= 95
    report(2, ok, f"max |sum(g)-1| {worst_sum:.1e}, soft permutation diff {soft_max_diff:.1e}, "
                  f"attention-GRU changed on {varied}/100")
    assert ok


def test_criterion_3_fusion_symmetry():
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(100):
        n, d, h = (int(v) for v in rng.integers(1, 10, size=3))
        layer = FusionLayer.create(d, h, rng)
        x = [ad.const(rng.normal(size=d)) for _ in range(n)]
        forward = fuse(layer, x).values.data
        swapped = fuse(layer.swapped(), x[::-1]).values.data
        exact += np.array_equal(forward[::-1], swapped)
    report(3, exact == 100, f"{exact}/100 instances bit-identical")
    assert exact == 100


@pytest.fixture(scope="module")
def single_fact_run(workdir):
    data = workdir / "single"
    assert cli("generate", "--family", "single_fact", "--n", 1000, "--n-test", 200, "--seed", 7,
               "--out", data) == 0
    train, test = data / "single_fact_train.txt", data / "single_fact_test.txt"
    run = train_and_score(train, test, workdir / "single_run", "--max-epochs", 50, "--test", test)
    return run, workdir / "single_run"


def test_criterion_4_single_fact(single_fact_run):
    run, _ = single_fact_run
    ok = run["accuracy"] >= 0.95 and run["epochs"] <= 50 and run["seconds"] < 600
    report(4, ok, f"test accuracy {run['accuracy']:.3f} after {run['epochs']} epochs in {run['seconds']:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def two_fact_data(workdir):
    data = workdir / "two"
    assert cli("generate", *TWO_FACT, "--out", data) == 0
    return data / "two_fact_train.txt", data / "two_fact_test.txt"


@pytest.fixture(scope="module")
def two_fact_runs(workdir, two_fact_data):
    train, test = two_fact_data
    budget = ["--max-epochs", TWO_FACT_EPOCHS]
    return {
        "dmn+": train_and_score(train, test, workdir / "two_dmnplus", "--variant", "dmn+", *budget),
        "no_memory": train_and_score(train, test, workdir / "two_nomem", "--variant", "dmn+",
                                     "--no-memory", *budget),
        "dmn2": train_and_score(train, test, workdir / "two_dmn2", "--variant", "dmn2", *budget),
        "odmn": train_and_score(train, test, workdir / "two_odmn", "--variant", "odmn", *budget),
    }


def test_criterion_5_two_fact_separation(two_fact_runs):
    full, ablated = two_fact_runs["dmn+"]["accuracy"], two_fact_runs["no_memory"]["accuracy"]
    ok = full >= 0.90 and ablated < 0.60
    report(5, ok, f"DMN+ {full:.3f}, [q;q] ablation {ablated:.3f}")
    assert ok


def test_criterion_6_fusion_ablation(two_fact_runs):
    dmn2, odmn = two_fact_runs["dmn2"]["accuracy"], two_fact_runs["odmn"]["accuracy"]
    gap = 100 * (dmn2 - odmn)
    ok = gap >= 5
    report(6, ok, f"DMN2 {dmn2:.3f} vs ODMN {odmn:.3f} ({gap:+.1f} points)")
    assert ok


def test_criterion_7_consensus_metric():
    cases = []
    for count in (0, 1, 2, 3, 5):
        for others in (0, 1, 4, 7):
            cases.append((count, others))
    assert len(cases) == 20
    mismatches = 0
    for count, others in cases:
        humans = ["yes"] * count + ["no"] * others
        if not humans:
            humans = ["maybe"]
        expected = float(min(Fraction(count, 3), Fraction(1)))
        mismatches += vqa_consensus_accuracy("yes", humans) != expected
    table = {c: vqa_consensus_accuracy("yes", ["yes"] * c + ["no"]) for c in (0, 1, 2, 3, 5)}
    ok = mismatches == 0 and list(table.values()) == [0.0, 1 / 3, 2 / 3, 1.0, 1.0]
    report(7, ok, f"{20 - mismatches}/20 cases exact")
    assert ok


def test_criterion_8_reproducibility(single_fact_run, workdir):
    run, first = single_fact_run
    assert cli("train", "--manifest", first / "manifest.json", "--out", workdir / "single_rerun") == 0
    again = [json.loads(l) for l in (workdir / "single_rerun" / "report.jsonl").read_text().splitlines()]
    ok = again == run["history"]
    report(8, ok, f"{len(again)} epochs, trajectories {'identical' if ok else 'differ'}")
    assert ok


def test_criterion_9_format_fidelity(tmp_path):
    original = read_babi(FIXTURES / "babi_sample.txt")
    (tmp_path / "rt.txt").write_text(format_babi(original))
    round_trip = read_babi(tmp_path / "rt.txt") == original
    rejected = []
    for name in ("malformed_header.fgrd", "size_mismatch.fgrd", "nonfinite.fgrd", "truncated.fgrd"):
        try:
            load_feature_grid(FIXTURES / name)
        except FormatError:
            rejected.append(name)
    good = load_feature_grid(FIXTURES / "grid_2x2x3.fgrd").patches().shape == (4, 3)
    ok = round_trip and len(rejected) == 4 and good
    report(9, ok, f"bAbI round trip {'ok' if round_trip else 'broken'}, "
                  f"{len(rejected)}/4 malformed grids rejected")
    assert ok
