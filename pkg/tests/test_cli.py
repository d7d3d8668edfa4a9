import csv
import logging
import subprocess
import sys

import numpy as np
import pytest

from graph_sampling.cli import BENCH_COLUMNS, main, read_config_file
from graph_sampling.errors import ParseError
from graph_sampling.evaluation import read_eval_csv
from graph_sampling.trainer import MetricsLog

GEN = ["gen", "--classes", "64", "--groups", "8", "--dim", "32", "--per-class", "6",
       "--seed", "1"]
FAST = ["--epochs", "2", "--decay-epoch", "1", "--batch-size", "16", "--k", "2"]


@pytest.fixture
def data(tmp_path):
    train, test = tmp_path / "train.csv", tmp_path / "test.csv"
    assert main(GEN + ["-o", str(train), "--test-classes", "16", "--test-out", str(test)]) == 0
    return train, test


def epoch_rows(path):
    rows = MetricsLog.read_iterations(path.read_text())
    return np.bincount([r[0] for r in rows]).tolist()


def test_gen_counts_and_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(GEN + ["-o", str(a)]) == 0
    assert "N=384 C=64 d_in=32" in capsys.readouterr().out
    assert main(GEN + ["-o", str(b)]) == 0
    lines = a.read_text().splitlines()
    assert len(lines) == 385 and lines[0].startswith("#")
    assert a.read_bytes() == b.read_bytes()


def test_gen_rejects_zero_groups(tmp_path, capsys):
    assert main(["gen", "--groups", "0", "-o", str(tmp_path / "x.csv")]) != 0
    assert "num_groups" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_gen_test_flags_must_pair(tmp_path):
    assert main(["gen", "--test-classes", "4", "-o", str(tmp_path / "x.csv")]) == 2


def test_train_gs_rows_per_epoch(tmp_path, data):
    train, test = data
    out = tmp_path / "run"
    assert main(["train", "--sampler", "gs", "--train", str(train), "--test", str(test),
                 "-o", str(out)] + FAST) == 0
    for name in ("model.ckpt", "metrics.csv", "epochs.csv", "curve.csv", "eval.csv",
                 "manifest.txt"):
        assert (out / name).exists()
    assert epoch_rows(out / "metrics.csv") == [64, 64]
    assert "sampler = gs" in (out / "manifest.txt").read_text()


def test_train_pk_matched_rows(tmp_path, data):
    train, _ = data
    out = tmp_path / "pk"
    assert main(["train", "--sampler", "pk", "--match-gs-iters", "--train", str(train),
                 "-o", str(out)] + FAST) == 0
    assert epoch_rows(out / "metrics.csv") == [64, 64]


def test_clip_zero_is_rejected(tmp_path, data, capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", "--train", str(data[0]), "-o", str(tmp_path / "r"), "--clip", "0"])
    assert err.value.code == 2
    assert "clip" in capsys.readouterr().err


def test_clip_none_disables(tmp_path, data):
    out = tmp_path / "r"
    assert main(["train", "--train", str(data[0]), "-o", str(out), "--clip", "none"]
                + FAST) == 0
    assert all(not r[7] for r in MetricsLog.read_iterations((out / "metrics.csv").read_text()))


def test_eval_reproduces_train_row(tmp_path, data):
    train, test = data
    out = tmp_path / "run"
    assert main(["train", "--train", str(train), "--test", str(test), "-o", str(out),
                 "--seed", "4"] + FAST) == 0
    ev = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(test),
                 "--seed", "4", "-o", str(ev)]) == 0
    assert ev.read_bytes() == (out / "eval.csv").read_bytes()
    assert read_eval_csv(ev.read_text())[0][1] == 4


def test_eval_missing_file(tmp_path, data, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["eval", "--checkpoint", str(missing), "--test", str(data[1]),
                 "-o", str(tmp_path / "e.csv")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_eval_dimension_mismatch(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--train", str(data[0]), "-o", str(out)] + FAST) == 0
    other = tmp_path / "other.csv"
    assert main(["gen", "--dim", "8", "--classes", "4", "--groups", "2", "-o", str(other)]) == 0
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(other),
                 "-o", str(tmp_path / "e.csv")]) == 2
    assert "d_in" in capsys.readouterr().err


def test_eval_queries_per_class_too_large(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--train", str(data[0]), "-o", str(out)] + FAST) == 0
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(data[1]),
                 "--queries-per-class", "6", "-o", str(tmp_path / "e.csv")]) == 2
    assert "queries_per_class" in capsys.readouterr().err


def test_train_metrics_byte_identical(tmp_path, data):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--train", str(data[0]), "-o", str(out), "--seed", "2"]
                    + FAST) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_divergence_writes_diagnostics(tmp_path):
    train = tmp_path / "big.csv"
    assert main(["gen", "--classes", "8", "--groups", "2", "--dim", "4", "--group-scale",
                 "1e100", "--class-scale", "1e100", "-o", str(train)]) == 0
    out = tmp_path / "run"
    code = main(["train", "--train", str(train), "-o", str(out), "--lr", "1e10", "--clip",
                 "none", "--margin", "1e250", "--batch-size", "4", "--sampler", "pk"])
    assert code == 3
    assert "non-finite" in (out / "diverged.json").read_text()


def test_config_file_precedence(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# shared settings\nbatch-size = 16\nepochs = 2\ndecay_epoch = 1\n"
                   "sampler = pk\nmatch-gs-iters = true\nseed = 9\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--train", str(data[0]), "-o", str(out),
                 "--seed", "3"]) == 0
    manifest = (out / "manifest.txt").read_text()
    assert "seed = 3" in manifest and "sampler = pk" in manifest
    assert "batch_size = 16" in manifest
    assert epoch_rows(out / "metrics.csv") == [64, 64]


def test_config_file_errors(tmp_path, data, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 2\nnot a pair\n")
    with pytest.raises(ParseError) as err:
        read_config_file(bad)
    assert err.value.line == 2
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("colour = blue\n")
    assert main(["train", "--config", str(unknown), "--train", str(data[0]),
                 "-o", str(tmp_path / "r")]) == 2
    assert "colour" in capsys.readouterr().err


def test_bench_four_runs(tmp_path, data, capsys, caplog):
    train, test = data
    out = tmp_path / "bench.csv"
    with caplog.at_level(logging.INFO, logger="graph_sampling"):
        assert main(["bench", "--train", str(train), "--test", str(test), "--runs", "4",
                     "--seed", "5", "--match-gs-iters", "-o", str(out),
                     "--eval-every", "16", "--num-clusters", "4"] + FAST) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == BENCH_COLUMNS
    for kind in ("pk", "cluster", "gs"):
        seeds = [int(r["seed"]) for r in rows if r["sampler"] == kind]
        assert seeds == [5 ^ run for run in range(4)]
    assert all(r["iters_to_target"] != "" for r in rows if r["sampler"] == "pk")
    printed = capsys.readouterr().out
    assert "over 4 runs" in printed and "+-" in printed
    hashes = [r.message for r in caplog.records if "sha256" in r.message]
    assert len(hashes) == 1 and "shared by every sampler" in hashes[0]


def test_bench_synthetic_data(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--classes", "16", "--groups", "4", "--test-classes", "8",
                 "--runs", "1", "--samplers", "gs,pk", "-o", str(out), "--num-clusters",
                 "2"] + FAST) == 0
    assert len(out.read_text().splitlines()) == 3


def test_bench_rejects_unknown_sampler(tmp_path, data):
    assert main(["bench", "--train", str(data[0]), "--test", str(data[1]), "--samplers",
                 "pk,random", "-o", str(tmp_path / "b.csv")]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.csv"
    proc = subprocess.run([sys.executable, "-m", "graph_sampling", "gen", "--classes", "4",
                           "--groups", "2", "-o", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
