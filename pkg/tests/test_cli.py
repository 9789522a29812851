"""End-to-end command-line tests: config parsing, exit codes, artifact
layout, eval/train agreement, and the visualization pipeline."""

import csv
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dascan.cli import (
    CONFIG_DEFAULTS,
    EXIT_BAD_CONFIG,
    EXIT_GRADCHECK,
    EXIT_NUMERIC,
    EXIT_OK,
    CliError,
    load_config,
    main,
)

TINY_CONFIG = """
# desk-sized smoke run
samples = 16
num_classes = 4
eval_fraction = 0.25
epochs = 1
batch_size = 8
lr = 1e-3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


# -- config file handling ------------------------------------------------------

def test_load_config_defaults_without_file():
    cfg = load_config(None)
    assert cfg == CONFIG_DEFAULTS
    assert cfg is not CONFIG_DEFAULTS   # caller gets a private copy


def test_load_config_coerces_and_overrides(tiny_config):
    cfg = load_config(tiny_config)
    assert cfg["samples"] == 16 and isinstance(cfg["samples"], int)
    assert cfg["lr"] == pytest.approx(1e-3)
    assert cfg["preset"] == "micro"     # untouched default survives


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("momentum = 0.9\n")
    with pytest.raises(CliError, match="momentum"):
        load_config(str(path))


def test_load_config_rejects_wrong_type(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("use_das = 3\n")
    with pytest.raises(CliError):
        load_config(str(path))


def test_load_config_missing_file():
    with pytest.raises(CliError, match="not found"):
        load_config("/nonexistent/run.cfg")


# -- exit codes ----------------------------------------------------------------

def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        run_cli()


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("bogus = 1\n")
    code = run_cli("train", "--config", str(path), "--out", str(tmp_path))
    assert code == EXIT_BAD_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_bad_thread_count_exits_2(tiny_config, tmp_path):
    assert run_cli("train", "--config", tiny_config, "--threads", "0",
                   "--out", str(tmp_path)) == EXIT_BAD_CONFIG


def test_gradcheck_ok_exits_0(capsys):
    assert run_cli("grad-check", "--op", "add") == EXIT_OK
    assert "all 1 gradient checks passed" in capsys.readouterr().out


def test_gradcheck_fault_exits_1(monkeypatch, capsys):
    monkeypatch.setenv("DASCAN_GRADCHECK_FAULT", "add")
    assert run_cli("grad-check", "--op", "add") == EXIT_GRADCHECK
    assert "BREACH" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_exits_3(tmp_path, capsys):
    path = tmp_path / "hot.cfg"
    path.write_text(TINY_CONFIG + "lr = 1e18\nepochs = 2\n")
    code = run_cli("train", "--config", str(path),
                   "--out", str(tmp_path / "run"))
    assert code == EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


# -- train / eval / viz pipeline ----------------------------------------------

def test_train_eval_viz_pipeline(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("train", "--config", tiny_config, "--out", str(out),
                   "--seed", "3") == EXIT_OK
    train_out = capsys.readouterr().out
    assert "best val accuracy" in train_out

    for name in ("manifest.txt", "metrics.csv", "last.dckp", "best.dckp"):
        assert (out / name).exists()
    manifest = (out / "manifest.txt").read_text()
    assert "command=train" in manifest and "seed=3" in manifest

    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    val_rows = [r for r in rows if r["split"] == "val"]
    assert rows[0]["split"] == "train" and val_rows
    best_logged = max(float(r["accuracy"]) for r in val_rows)

    # eval on the best checkpoint reproduces the logged accuracy
    assert run_cli("eval", "--checkpoint", str(out / "best.dckp"),
                   "--config", tiny_config) == EXIT_OK
    eval_out = capsys.readouterr().out
    line = next(l for l in eval_out.splitlines() if "val accuracy" in l)
    assert float(line.split()[-1]) == pytest.approx(best_logged, abs=1e-6)

    viz = tmp_path / "viz"
    assert run_cli("scan-viz", "--checkpoint", str(out / "best.dckp"),
                   "--stage", "1", "--out", str(viz)) == EXIT_OK
    svg = (viz / "path.svg").read_text()
    root = ET.fromstring(svg)           # well-formed XML
    markers = [el for el in root.iter() if el.get("class") == "marker"]
    segs = [el for el in root.iter() if el.get("class") == "seg"]
    assert len(markers) == 16 * 16      # stage-1 grid of a 64px input
    assert len(segs) == len(markers) - 1
    from dascan.scan import ScanPlan
    plan = ScanPlan.parse((viz / "plan.txt").read_text())
    assert plan.height == plan.width == 16
    assert (viz / "manifest.txt").exists()


def test_eval_missing_checkpoint_exits_2(tmp_path):
    assert run_cli("eval", "--checkpoint",
                   str(tmp_path / "nope.dckp")) == EXIT_BAD_CONFIG


def test_bench_writes_csv_and_exponents(tmp_path, capsys):
    out = tmp_path / "bench"
    assert run_cli("bench", "--lengths", "64,128", "--reps", "2",
                   "--out", str(out)) == EXIT_OK
    printed = capsys.readouterr().out
    assert "scan growth exponent" in printed
    assert "attention growth exponent" in printed
    with open(out / "bench.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["kernel"] for r in rows} == {"scan", "attention"}
    assert (out / "manifest.txt").exists()
