import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from tritrain.analysis import BENCH_SCHEMA
from tritrain.checkpoint import load_checkpoint
from tritrain.cli import EXIT_DIVERGED, EXIT_ERROR, EXIT_MISSING, main
from tritrain.data import synthetic_corpus

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.cfg")
STEPS = ["--set", "train.total_steps=6"]


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("corpus") / "c.txt"
    path.write_text(synthetic_corpus(6000, seed=3), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus) -> Path:
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", TINY, *STEPS, "--corpus", str(corpus), "--out", str(out)]) == 0
    return out


def test_train_outputs(trained, capsys):
    for name in ("checkpoint.tlm", "manifest.txt", "train_log.csv", "val_log.csv",
                 "quant_stats.csv", "histograms.csv"):
        assert (trained / name).is_file(), name
    manifest = (trained / "manifest.txt").read_text()
    assert "corpus.sha256=" in manifest and "train.total_steps=6" in manifest
    assert not (trained / ".lock").exists()


def test_train_is_deterministic(trained, corpus, tmp_path, capsys):
    assert main(["train", "--config", TINY, *STEPS, "--corpus", str(corpus), "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "checkpoint.tlm") == sha(trained / "checkpoint.tlm")
    assert (tmp_path / "train_log.csv").read_text() == (trained / "train_log.csv").read_text()


def test_seed_changes_checkpoint(trained, corpus, tmp_path, capsys):
    main(["train", "--config", TINY, *STEPS, "--seed", "1", "--corpus", str(corpus), "--out", str(tmp_path)])
    assert sha(tmp_path / "checkpoint.tlm") != sha(trained / "checkpoint.tlm")


def test_missing_corpus_exit_code(tmp_path, capsys):
    code = main(["train", "--config", TINY, "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path)])
    assert code == EXIT_MISSING
    assert "corpus not found" in capsys.readouterr().err


def test_unknown_config_key(corpus, tmp_path, capsys):
    code = main(["train", "--set", "model.bogus=1", "--corpus", str(corpus), "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "model.bogus" in capsys.readouterr().err


def test_divergence_exit_code(corpus, tmp_path, capsys, monkeypatch):
    from tritrain import cli
    from tritrain.train import DivergenceError

    def boom(*a, **k):
        raise DivergenceError(3, float("inf"), "non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    code = main(["train", "--config", TINY, "--corpus", str(corpus), "--out", str(tmp_path)])
    assert code == EXIT_DIVERGED


def test_lock_blocks_second_invocation(corpus, tmp_path, capsys):
    (tmp_path / ".lock").write_text(str(os.getpid()))
    code = main(["train", "--config", TINY, *STEPS, "--corpus", str(corpus), "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "in use" in capsys.readouterr().err


def test_stale_lock_is_reclaimed(corpus, tmp_path, capsys):
    proc = subprocess.Popen([sys.executable, "-c", "pass"])
    proc.wait()
    (tmp_path / ".lock").write_text(str(proc.pid))
    assert main(["train", "--config", TINY, *STEPS, "--corpus", str(corpus), "--out", str(tmp_path)]) == 0
    assert not (tmp_path / ".lock").exists()


def test_eval_and_mismatched_alphabet(trained, corpus, tmp_path, capsys):
    ck = str(trained / "checkpoint.tlm")
    assert main(["eval", "--checkpoint", ck, "--corpus", str(corpus), "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip()
    report = json.loads((tmp_path / "eval.json").read_text())
    assert line == f"val_ppl={report['val_ppl']:.6f}"
    other = tmp_path / "other.txt"
    other.write_text("zzzéé", encoding="utf-8")
    assert main(["eval", "--checkpoint", ck, "--corpus", str(other)]) == EXIT_ERROR
    assert "é" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "no.tlm"), "--corpus", str(corpus)]) == EXIT_MISSING


def test_pack_then_eval_matches(trained, corpus, tmp_path, capsys):
    ck = str(trained / "checkpoint.tlm")
    main(["eval", "--checkpoint", ck, "--corpus", str(corpus)])
    dense = float(capsys.readouterr().out.split("=")[1])
    assert main(["pack", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert "overall ratio" in capsys.readouterr().out
    assert (tmp_path / "storage.csv").is_file()
    assert load_checkpoint(tmp_path / "checkpoint.tlm").packed
    main(["eval", "--checkpoint", str(tmp_path / "checkpoint.tlm"), "--corpus", str(corpus)])
    packed = float(capsys.readouterr().out.split("=")[1])
    assert abs(packed - dense) / dense < 1e-3


def test_generate_reproducible_and_echo(trained, tmp_path, capsys):
    ck = str(trained / "checkpoint.tlm")
    args = ["generate", "--checkpoint", ck, "--prompt", "the ", "--max-new", "40", "--seed", "7"]
    main(args)
    a = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == a
    assert a.startswith("the ")
    main(["generate", "--checkpoint", ck, "--prompt", "the ", "--max-new", "0"])
    assert capsys.readouterr().out == "the \n"


def test_generate_trace(trained, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    main(["generate", "--checkpoint", str(trained / "checkpoint.tlm"), "--prompt", "a",
          "--max-new", "15", "--p", "0.5", "--trace", str(trace)])
    steps = [json.loads(line) for line in trace.read_text().splitlines()]
    assert len(steps) == 15
    assert all(s["token"] in s["nucleus_ids"] for s in steps)


def test_generate_rejects_unknown_prompt_char(trained, capsys):
    code = main(["generate", "--checkpoint", str(trained / "checkpoint.tlm"), "--prompt", "☃"])
    assert code == EXIT_ERROR


def test_finetune_toy(trained, tmp_path, capsys):
    code = main(["finetune", "--checkpoint", str(trained / "checkpoint.tlm"), "--n-examples", "40",
                 "--epochs", "20", "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "finetune.json").read_text())
    assert report["n_examples"] == 40 and 0.0 <= report["accuracy"] <= 1.0


def test_finetune_labelled_file(trained, tmp_path, capsys):
    data = tmp_path / "d.tsv"
    data.write_text("0\tthe cat\n1\tthe dog\n\n1\ta dog\n", encoding="utf-8")
    assert main(["finetune", "--checkpoint", str(trained / "checkpoint.tlm"), "--data", str(data),
                 "--epochs", "5", "--out", str(tmp_path / "o")]) == 0
    data.write_text("x\tbad label\n", encoding="utf-8")
    assert main(["finetune", "--checkpoint", str(trained / "checkpoint.tlm"), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == EXIT_ERROR


def test_analyze_fresh_init(tmp_path, capsys):
    assert main(["analyze", "--config", TINY, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "analysis.json").read_text())
    assert set(summary["blocks"]) == {"blocks.0", "blocks.1"}
    for v in summary["blocks"].values():
        assert 0.3 < v < 0.45
    header = (tmp_path / "histograms.csv").read_text().splitlines()[0]
    assert header == "layer,bin_left,bin_right,count"


def test_analyze_checkpoint(trained, tmp_path, capsys):
    assert main(["analyze", "--checkpoint", str(trained / "checkpoint.tlm"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sparsity.csv").is_file()


def test_bench_json(trained, tmp_path, capsys):
    assert main(["bench", "--config", TINY, "--seq-len", "8", "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())
    jsonschema.validate(rows, BENCH_SCHEMA)
    assert main(["bench", "--checkpoint", str(trained / "checkpoint.tlm"), "--repeats", "3",
                 "--out", str(tmp_path)]) == EXIT_ERROR


def test_ablate_subset(corpus, tmp_path, capsys):
    code = main(["ablate", "--config", TINY, "--set", "train.total_steps=2", "--only", "full", "binary",
                 "--corpus", str(corpus), "--out", str(tmp_path)])
    assert code == 0
    lines = (tmp_path / "ablations.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["full", "binary"]


def test_entry_point_help_lists_defaults():
    res = subprocess.run([sys.executable, "-m", "tritrain.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for frag in ("peak_lr=0.001", "label_smoothing=0.1", "train", "generate", "pack"):
        assert frag in res.stdout
    res = subprocess.run([sys.executable, "-m", "tritrain.cli", "generate", "--help"],
                         capture_output=True, text=True)
    assert "default: 0.9" in res.stdout
