import csv
import json
import subprocess
import sys
from collections import defaultdict

import numpy as np
import pytest

from dmnplus.cli import main
from dmnplus.visual import save_feature_grid


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def text_data(tmp_path):
    out = tmp_path / "data"
    assert run("generate", "--family", "single_fact", "--n", 120, "--n-test", 30,
               "--seed", 7, "--out", out) == 0
    return out / "single_fact_train.txt", out / "single_fact_test.txt"


@pytest.fixture
def image_data(tmp_path):
    rng = np.random.default_rng(0)
    folder = tmp_path / "img"
    folder.mkdir()
    with open(folder / "qa.jsonl", "w") as fh:
        for i in range(12):
            values = rng.normal(size=(2, 3, 4))
            save_feature_grid(folder / f"g{i}.fgrd", values)
            answer = "red" if values[0, 0, 0] > 0 else "blue"
            fh.write(json.dumps({"grid": f"g{i}.fgrd", "question": "what color?",
                                 "answer": answer, "human_answers": [answer] * 3}) + "\n")
    return folder / "qa.jsonl"


def small_train(train, out, *extra):
    return run("train", "--train", train, "--out", out, "--hidden", 8, "--batch-size", 16,
               "--max-epochs", 2, *extra)


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--family", "two_fact", "--n", 50, "--seed", 3, "--out", tmp_path / d) == 0
    for name in ("two_fact_train.txt", "two_fact_test.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_invalid_family(capsys):
    with pytest.raises(SystemExit) as info:
        run("generate", "--family", "nope")
    assert info.value.code != 0
    assert "invalid choice" in capsys.readouterr().err


def test_generate_invalid_spec(tmp_path, capsys):
    assert run("generate", "--family", "two_fact", "--story-length", 1, "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "\n" not in err


def test_train_writes_artifacts(text_data, tmp_path):
    train, test = text_data
    out = tmp_path / "run"
    assert small_train(train, out, "--test", test) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["variant"] == "dmn+"
    assert manifest["model_config"]["attention"] == "attn_gru"
    assert manifest["train_config"]["lr"] == 0.001 and manifest["train_config"]["patience"] == 20
    assert manifest["datasets"]["train"] == str(train)
    lines = (out / "report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    assert (out / "model.npz").is_file()


def test_train_defaults_follow_protocol():
    from dmnplus.cli import build_parser
    args = build_parser().parse_args(["train", "--train", "x", "--out", "y"])
    assert (args.lr, args.batch_size, args.hidden, args.passes) == (0.001, 128, 80, 3)
    assert (args.patience, args.keep_p, args.sentence_limit, args.restarts) == (20, 0.9, 70, 1)


def test_manifest_reproduces_run(text_data, tmp_path):
    train, _ = text_data
    assert small_train(train, tmp_path / "r1") == 0
    assert run("train", "--manifest", tmp_path / "r1" / "manifest.json", "--out", tmp_path / "r2") == 0
    assert (tmp_path / "r1" / "report.jsonl").read_text() == (tmp_path / "r2" / "report.jsonl").read_text()


def test_train_missing_dataset(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("train", "--train", tmp_path / "missing.txt", "--out", tmp_path / "o")
    assert info.value.code == 2


@pytest.mark.parametrize("variant", ["odmn", "dmn2", "dmn3", "dmn+"])
def test_variants_train(text_data, tmp_path, variant):
    train, _ = text_data
    assert small_train(train, tmp_path / variant, "--variant", variant, "--max-epochs", 1) == 0
    cfg = json.loads((tmp_path / variant / "manifest.json").read_text())["model_config"]
    expected = {"odmn": ("word_gru", "soft", "gru", "tied"), "dmn2": ("fusion", "soft", "gru", "tied"),
                "dmn3": ("fusion", "attn_gru", "gru", "tied"),
                "dmn+": ("fusion", "attn_gru", "relu", "untied")}[variant]
    assert (cfg["input_module"], cfg["attention"], cfg["update"], cfg["weights"]) == expected


def test_eval_and_metrics_file(text_data, tmp_path):
    train, test = text_data
    small_train(train, tmp_path / "run")
    metrics = tmp_path / "m.json"
    assert run("eval", "--checkpoint", tmp_path / "run" / "model.npz", "--data", test, "--out", metrics) == 0
    m = json.loads(metrics.read_text())
    assert m["metric"] == "exact" and m["n"] == 30
    assert m["error_rate"] == pytest.approx(1 - m["accuracy"])


def test_eval_memorised_train_split(tmp_path):
    data = tmp_path / "tiny.txt"
    data.write_text("1 mary went to the park.\n2 where is mary?\tpark\t1\n"
                    "1 john went to the office.\n2 where is john?\toffice\t1\n")
    out = tmp_path / "run"
    assert run("train", "--train", data, "--val", data, "--out", out, "--hidden", 8,
               "--batch-size", 2, "--max-epochs", 80, "--lr", 0.02, "--keep-p", 1.0) == 0
    metrics = tmp_path / "m.json"
    run("eval", "--checkpoint", out / "model.npz", "--data", data, "--out", metrics)
    assert json.loads(metrics.read_text())["accuracy"] == 1.0


def test_eval_missing_checkpoint(text_data, tmp_path):
    with pytest.raises(SystemExit) as info:
        run("eval", "--checkpoint", tmp_path / "none.npz", "--data", text_data[1])
    assert info.value.code == 2


def test_gates_csv(text_data, tmp_path):
    train, test = text_data
    small_train(train, tmp_path / "run")
    out = tmp_path / "g.csv"
    assert run("gates", "--checkpoint", tmp_path / "run" / "model.npz", "--data", test,
               "--out", out, "--limit", 5) == 0
    rows = list(csv.DictReader(open(out)))
    sums = defaultdict(float)
    for r in rows:
        sums[r["example_id"], r["pass"]] += float(r["gate"])
    assert len(sums) == 5 * 3
    assert all(abs(s - 1) < 1e-6 for s in sums.values())
    # stories have 8 sentences each
    assert len(rows) == 5 * 3 * 8


def test_image_pipeline(image_data, tmp_path):
    out = tmp_path / "vrun"
    assert small_train(image_data, out) == 0
    assert json.loads((out / "manifest.json").read_text())["model_config"]["input_module"] == "visual"
    assert run("eval", "--checkpoint", out / "model.npz", "--data", image_data,
               "--metric", "vqa_consensus") == 0
    gates = tmp_path / "vg.csv"
    assert run("gates", "--checkpoint", out / "model.npz", "--data", image_data,
               "--out", gates, "--limit", 1) == 0
    rows = list(csv.DictReader(open(gates)))
    first_pass = [(int(r["row"]), int(r["col"])) for r in rows if r["pass"] == "1"]
    assert first_pass == [(0, 0), (0, 1), (0, 2), (1, 2), (1, 1), (1, 0)]


def test_image_rejects_odmn(image_data, tmp_path):
    with pytest.raises(SystemExit):
        run("train", "--train", image_data, "--out", tmp_path / "x", "--variant", "odmn")


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--input-module", "fusion", "--attention", "soft",
               "--update", "gru", "--weights", "tied") == 0
    assert "worst parameter:" in capsys.readouterr().out


def test_gradcheck_corrupted_op_fails(tmp_path, capsys):
    report = tmp_path / "gc.json"
    assert run("gradcheck", "--input-module", "fusion", "--attention", "attn_gru", "--update", "relu",
               "--weights", "untied", "--corrupt-op", "tanh", "--out", report) == 1
    captured = capsys.readouterr()
    assert captured.err.strip().startswith("error:")
    record = json.loads(report.read_text())[0]
    assert not record["passed"]
    assert record["worst_param"] in captured.out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dmnplus", "generate", "--family", "counting",
                           "--n", "5", "--n-test", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
