"""End-to-end smoke tests that invoke main() per subcommand.

These cover the argparse wiring and config merging, the layer that
unit tests on individual functions miss. Each builds the smallest input
needed and asserts on main()'s exit code and output files.
"""

import csv
import json
import sys
from pathlib import Path

import pytest

from scenario_flow.cli import main

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

TINY_RUN = {
    "synth_data": {"n": 8, "length": 16, "net_levels": 2},
    "annotate": {"embedding_dim": 16},
    "probe": {"embedding_dim": 16},
    "train": {
        "net": {"length": 16, "base_channels": 8, "channel_multipliers": [1, 2], "groups": 4,
                "d_llm": 16, "d_k": 8},
        "train": {"epochs": 1, "batch_size": 4},
    },
}


def _run_cli(monkeypatch, *args) -> int:
    """Invoke main() with the given argv, return the exit code."""
    monkeypatch.setattr(sys, "argv", ["scenario-flow", *args])
    return main()


def _write_config(path: Path) -> Path:
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Smoke tests
# ---------------------------------------------------------------------------


def test_full_pipeline_smoke(monkeypatch, tmp_path, capsys):
    config = str(_write_config(tmp_path / "tiny.json"))
    data, model, gen, scores = (str(tmp_path / d) for d in ("data", "model", "gen", "scores"))

    assert _run_cli(monkeypatch, "synth-data", "--config", config, "-o", data) == 0
    assert (tmp_path / "data" / "dataset.jsonl").exists()
    assert (tmp_path / "data" / "labels.csv").exists()
    assert (tmp_path / "data" / "resolved-config.json").exists()

    dataset = str(tmp_path / "data" / "dataset.jsonl")
    annotated = str(tmp_path / "data" / "annotated.jsonl")
    assert _run_cli(monkeypatch, "annotate", "--config", config, "--dataset", dataset,
                    "-o", data) == 0
    assert (tmp_path / "data" / "embeddings.jsonl").exists()

    assert _run_cli(monkeypatch, "train", "--config", config, "--dataset", annotated,
                    "--max-steps", "2", "-o", model) == 0
    checkpoint = str(tmp_path / "model" / "checkpoint.pt")
    assert Path(checkpoint).exists()
    assert len(list(csv.reader((tmp_path / "model" / "losses.csv").open()))) == 3

    assert _run_cli(monkeypatch, "sample", "--config", config, "--checkpoint", checkpoint,
                    "--prompts", annotated, "--steps", "3", "--per-prompt", "2",
                    "-o", gen) == 0
    generated = str(tmp_path / "gen" / "generated.jsonl")
    assert len(Path(generated).read_text().splitlines()) == 16

    assert _run_cli(monkeypatch, "eval", "--config", config, "--real", dataset,
                    "--generated", generated, "-o", scores) == 0
    assert (tmp_path / "scores" / "metrics.csv").exists()

    assert _run_cli(monkeypatch, "judge", "--config", config, "--generated", generated,
                    "-o", scores) == 0
    summary = json.loads((tmp_path / "scores" / "judge-summary.json").read_text())
    assert 1.0 <= summary["mjas"] <= 5.0

    assert _run_cli(monkeypatch, "probe", "--config", config, "--dataset", annotated,
                    "-o", scores) == 0
    assert (tmp_path / "scores" / "probes.csv").exists()

    out = capsys.readouterr().out
    assert "SCENARIO EVALUATION" in out
    assert "JUDGE REPORT" in out


def test_eval_of_a_set_against_itself_is_zero(monkeypatch, tmp_path):
    out = str(tmp_path)
    assert _run_cli(monkeypatch, "synth-data", "--n", "6", "--length", "32", "-o", out) == 0
    dataset = str(tmp_path / "dataset.jsonl")
    assert _run_cli(monkeypatch, "eval", "--real", dataset, "--generated", dataset, "-o", out) == 0
    row = next(csv.DictReader((tmp_path / "metrics.csv").open()))
    for name in ("kl", "mmd2", "dtw_mean", "psdd", "marr_gap"):
        assert float(row[name]) == pytest.approx(0.0, abs=1e-12), name
    assert float(row["fd"]) == pytest.approx(0.0, abs=1e-6)


def test_seed_flag_reaches_training_config(monkeypatch, tmp_path):
    out = str(tmp_path)
    assert _run_cli(monkeypatch, "synth-data", "--n", "2", "--length", "16", "--seed", "7",
                    "-o", out) == 0
    resolved = json.loads((tmp_path / "resolved-config.json").read_text())
    assert resolved["global"]["seed"] == 7
    assert resolved["train"]["train"]["seed"] == 7
    assert json.loads((tmp_path / "run.json").read_text())["command"] == "synth-data"


def test_missing_input_file_exits_1(monkeypatch, tmp_path):
    rc = _run_cli(monkeypatch, "judge", "--generated", str(tmp_path / "nope.jsonl"),
                  "-o", str(tmp_path))
    assert rc == 1


def test_missing_required_flag_exits_1(monkeypatch, tmp_path):
    assert _run_cli(monkeypatch, "eval", "--real", str(tmp_path / "a.jsonl"),
                    "-o", str(tmp_path)) == 1


def test_unknown_config_key_exits_1(monkeypatch, tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"trian": {}}))
    assert _run_cli(monkeypatch, "synth-data", "--config", str(config), "-o", str(tmp_path)) == 1


def test_no_command_prints_help(monkeypatch, capsys):
    assert _run_cli(monkeypatch) == 1
    assert "synth-data" in capsys.readouterr().out
