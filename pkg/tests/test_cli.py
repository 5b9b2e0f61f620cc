import json
import subprocess
import sys

import pytest

from casseg.cli import main

SMALL = ["--set", "steps=5", "--set", "data.count=6", "--set", "data.test_count=3", "--set", "data.size=16",
         "--set", "hidden=3"]


def test_gen_data_shapes(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "3", "--size", "16", "--flip-fraction", "0.34"]) == 0
    index = json.loads((tmp_path / "index.json").read_text())
    assert len(index["samples"]) == 3
    assert sum(e["fidelity_flag"] for e in index["samples"]) == 1


def test_gen_data_toy(tmp_path):
    assert main(["gen-data", "--kind", "toy", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "toy_train.csv").read_text().splitlines()
    assert lines[0] == "x,y,class_id" and len(lines) == 10011


@pytest.mark.parametrize("argv", [
    ["gen-data", "--count", "0"],
    ["gen-data", "--size", "8"],
    ["train", "--set", "alpha=2"],
    ["train", "--set", "bogus=1"],
    ["train", "--config", "/nonexistent.json"],
    ["experiment", "--preset", "nope"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == 2


def test_train_then_eval(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run)] + SMALL) == 0
    assert (run / "loss_curve.svg").is_file() and (run / "config.json").is_file()
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--out", str(ev)] + SMALL) == 0
    assert (ev / "metrics.csv").read_text().startswith("cell,loss,")
    # architecture mismatch
    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--out", str(ev), "--set", "hidden=4"]) == 2


def test_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"loss": "ce", "steps": 2, "data": {"count": 5, "size": 16, "test_count": 2}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["loss"] == "ce" and saved["data"]["count"] == 5 and saved["data"]["noise"] == 0.1


def test_grad_check(tmp_path, capsys):
    assert main(["grad-check", "--instances", "3", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert json.loads((tmp_path / "report.json").read_text())["max_rel_err"] < 1e-5


def test_default_out_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CASSEG_OUT_DIR", str(tmp_path))
    assert main(["gen-data", "--count", "1", "--size", "16"]) == 0
    assert (tmp_path / "gen-data" / "index.json").is_file()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "casseg", "grad-check", "--instances", "1"],
                       capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == 0 and r.stdout.startswith("max relative error")
