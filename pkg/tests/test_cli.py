from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from edgekd import harness
from edgekd import metrics as mx
from edgekd.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUN_FAILURE, main
from edgekd.errors import ConfigError

TINY = {
    "dataset": {"samples_per_class": 40, "test_per_class": 10, "input_dim": 6, "class_count": 3},
    "model": {"hidden": [8]},
    "training": {"core": {"epochs": 2, "base_lr": 0.02}, "distill": {"epochs": 2, "base_lr": 0.01}},
}


def _scenario(tmp_path, extra=None):
    raw = {**TINY, "partition": {"edges": 2}, "variant": "CPP", **(extra or {})}
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_presets_expand_to_expected_runs():
    matrix = harness.get_preset("variant_matrix")
    assert list(matrix.runs) == ["IsPP", "IPP", "IEP", "IPM", "CPP", "CEP", "CPM", "CEM"]
    assert matrix.seeds == [1, 2, 3, 4, 5]
    lagged = harness.get_preset("lagged_edge")
    assert list(lagged.runs) == ["abort", "no_lag", "use_on_arrival"]
    cfg = lagged.configs(1)["abort"]
    assert cfg.partition.edges == 2 and cfg.timeline.order == [2, 1] and cfg.lag.delays == {2: 2}
    noisy = harness.get_preset("noisy_edge").configs(3)
    assert noisy["p=1"].noise.edges == [4, 7] and noisy["clean"].noise.p == 0
    assert noisy["p=0.5"].noise.p == 0.5
    assert set(harness.get_preset("consensus_study").runs) == {"CPP", "IPP"}


def test_unknown_preset_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--preset", "nope", "--out", str(out)]) == EXIT_CONFIG_ERROR
    assert not out.exists()
    assert "must be one of" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        harness.get_preset("nope")


def test_run_experiment_files_and_aggregate(tmp_path):
    out = tmp_path / "lag"
    manifest = harness.run_experiment("lagged_edge", out, seeds=[1, 2], overrides=TINY)
    assert len(manifest["runs"]) == 6
    assert manifest["version"] and manifest["golden"] is True
    for run in manifest["runs"]:
        assert (out / run["csv"]).exists() and (out / run["summary"]).exists()
        assert run["config"]["derived"]["teacher_set_ceiling"] == 6
    agg = json.loads((out / "aggregate.json").read_text())
    assert [row["run"] for row in agg["final_accuracy_table"]] == ["abort", "no_lag", "use_on_arrival"]
    # recompute from the CSVs
    for row in agg["final_accuracy_table"]:
        finals = [mx.read_csv_rows((out / f"{row['run']}_seed{s}.csv").read_text())[-1]["core_test_acc"]
                  for s in (1, 2)]
        assert row["final_core_test_acc"]["mean"] == pytest.approx(np.mean(finals), abs=1e-15)
        assert row["final_core_test_acc"]["std"] == pytest.approx(np.std(finals, ddof=1), abs=1e-15)
    assert agg["audit"]["core_reads_of_edge_data"] == 0
    abort_rows = mx.read_csv_rows((out / "abort_seed1.csv").read_text())
    assert len(abort_rows) == 2


def test_replay_is_bitwise(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_scenario(tmp_path)), "--out", str(out), "--seed", "3,4"]) == EXIT_OK
    manifest = out / "manifest.json"
    assert len(json.loads(manifest.read_text())["runs"]) == 2
    replayed = tmp_path / "again"
    assert main(["replay", str(manifest), "--out", str(replayed)]) == EXIT_OK
    assert (replayed / "CPP_seed3.csv").read_bytes() == (out / "CPP_seed3.csv").read_bytes()
    report = harness.replay(manifest)
    assert report.ok and report.compared == 2


def test_replay_detects_mismatch(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_scenario(tmp_path)), "--out", str(out)]) == EXIT_OK
    path = out / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["runs"][0]["csv_sha256"] = "0" * 64
    path.write_text(json.dumps(manifest))
    assert main(["replay", str(path)]) == EXIT_RUN_FAILURE
    # multi-threaded replay skips the golden comparison
    assert main(["replay", str(path), "--threads", "2"]) == EXIT_OK


def test_threads_mark_manifest_non_golden(tmp_path):
    out = tmp_path / "t"
    assert main(["run", "--config", str(_scenario(tmp_path)), "--out", str(out), "--threads", "2"]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["golden"] is False


def test_validate_prints_resolved_config(tmp_path, capsys):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert main(["validate", "--config", str(path)]) == EXIT_OK
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["variant"] == "CEM" and resolved["derived"]["teacher_set_ceiling"] == 6


def test_validate_errors_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("distill:\n  temperature: -1\n")
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG_ERROR
    err = json.loads(capsys.readouterr().err)
    assert err["errors"][0]["field"] == "distill.temperature"
    assert main(["validate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG_ERROR


def test_run_with_invalid_config_writes_nothing(tmp_path):
    out = tmp_path / "out"
    path = _scenario(tmp_path, {"variant": "ZZZ"})
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_CONFIG_ERROR
    assert not out.exists()


def test_run_failure_exit_1(tmp_path):
    path = _scenario(tmp_path, {"training": {**TINY["training"],
                                             "edge": {"epochs": 1, "base_lr": 1e300, "momentum": 0.0}}})
    with pytest.warns(RuntimeWarning):
        code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == EXIT_RUN_FAILURE


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "edgekd", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("edgekd ")
