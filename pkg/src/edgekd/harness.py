"""Experiment presets, multi-seed sweeps, aggregation and manifest replay.

A preset expands into a list of named scenario variants. ``run_experiment``
runs every variant for every seed, writes one round CSV and one summary JSON
per run, then an aggregate JSON computed from those CSVs and a manifest that
holds each run's fully resolved config. ``replay`` re-runs a manifest and
compares the CSV bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import metrics as mx
from .config import VARIANTS, ScenarioConfig, build_config, deep_merge
from .errors import ConfigError
from .simulator import run_simulation

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3, 4, 5)
MANIFEST_NAME = "manifest.json"
AGGREGATE_NAME = "aggregate.json"

# two edges; edge 2 is dispatched first and its uplink lands after edge 1's round
LAGGED_BASE: dict[str, Any] = {
    "variant": "CEM",
    "partition": {"edges": 2},
    "timeline": {"order": [2, 1]},
    "lag": {"delays": {2: 2}},
}
NOISY_EDGES = [4, 7]


@dataclass
class ExperimentPreset:
    name: str
    runs: dict[str, dict[str, Any]]
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    overrides: dict[str, Any] = field(default_factory=dict)

    def configs(self, seed: int) -> dict[str, ScenarioConfig]:
        out = {}
        for label, fragment in self.runs.items():
            raw = deep_merge(deep_merge(fragment, self.overrides), {"seed": seed, "name": f"{self.name}/{label}"})
            out[label] = build_config(raw)
        return out


def _variant_matrix() -> dict[str, dict]:
    return {v: {"variant": v} for v in VARIANTS}


def _lagged_edge() -> dict[str, dict]:
    return {policy: deep_merge(LAGGED_BASE, {"lag": {"policy": policy}})
            for policy in ("abort", "no_lag", "use_on_arrival")}


def _noisy_edge() -> dict[str, dict]:
    runs = {"clean": {"variant": "CEM"}}
    for p in (1.0, 0.5):
        runs[f"p={p:g}"] = {"variant": "CEM", "noise": {"p": p, "edges": list(NOISY_EDGES)}}
    return runs


def _consensus_study() -> dict[str, dict]:
    return {"CPP": {"variant": "CPP"}, "IPP": {"variant": "IPP"}}


PRESETS = {
    "variant_matrix": _variant_matrix,
    "lagged_edge": _lagged_edge,
    "noisy_edge": _noisy_edge,
    "consensus_study": _consensus_study,
}


def get_preset(name: str, seeds: list[int] | None = None,
               overrides: dict[str, Any] | None = None) -> ExperimentPreset:
    if name not in PRESETS:
        raise ConfigError([{"field": "preset", "value": name,
                            "constraint": f"must be one of {sorted(PRESETS)}", "line": None}])
    preset = ExperimentPreset(name, PRESETS[name](), list(seeds or DEFAULT_SEEDS), dict(overrides or {}))
    # validate every config before anything touches the disk
    for seed in preset.seeds:
        preset.configs(seed)
    return preset


def config_preset(cfg: ScenarioConfig, seeds: list[int] | None = None) -> ExperimentPreset:
    """Wrap a single scenario file as a one-run preset."""
    raw = cfg.model_dump(mode="json")
    raw.pop("seed")
    name = raw.pop("name")
    return ExperimentPreset(name, {cfg.variant: raw}, list(seeds or [cfg.seed]))


def run_file_stem(label: str, seed: int) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
    return f"{safe}_seed{seed}"


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _mean_std(values: list[float]) -> dict[str, float | None]:
    arr = np.array([v for v in values if not math.isnan(v)], dtype=float)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


AGG_COLUMNS = ("core_test_acc", "edge_test_acc", "core_train_acc", "consensus_current",
               "consensus_edge1", "transfer_score", "spike_flag")


def aggregate(csv_by_label: dict[str, dict[int, str]]) -> dict[str, Any]:
    """Seed-wise mean and sample std, recomputed from the CSV text only."""
    table = []
    per_round: dict[str, dict] = {}
    for label, by_seed in csv_by_label.items():
        parsed = {seed: mx.read_csv_rows(text) for seed, text in by_seed.items()}
        finals = [rows[-1]["core_test_acc"] for rows in parsed.values()]
        table.append({"run": label, "final_core_test_acc": _mean_std(finals),
                      "seeds": sorted(parsed)})
        n_rounds = max(len(rows) for rows in parsed.values())
        rounds = []
        for r in range(n_rounds):
            entry: dict[str, Any] = {"round": r}
            for col in AGG_COLUMNS:
                entry[col] = _mean_std([float(rows[r][col]) for rows in parsed.values() if r < len(rows)])
            rounds.append(entry)
        per_round[label] = rounds
    return {"final_accuracy_table": table, "per_round": per_round}


def _execute(preset: ExperimentPreset, out: Path, threads: int) -> dict[str, Any]:
    out.mkdir(parents=True, exist_ok=True)
    runs_meta = []
    csv_by_label: dict[str, dict[int, str]] = {label: {} for label in preset.runs}
    audit_totals = {"core_reads_of_edge_data": 0, "max_memory_size": 0}
    for seed in preset.seeds:
        for label, cfg in preset.configs(seed).items():
            started = time.perf_counter()
            result = run_simulation(cfg, threads=threads)
            text = mx.records_to_csv(result.records)
            stem = run_file_stem(label, seed)
            (out / f"{stem}.csv").write_text(text)
            summary = result.summary(cfg)
            (out / f"{stem}.json").write_text(json.dumps(summary, indent=2, allow_nan=True))
            csv_by_label[label][seed] = text
            audit_totals["core_reads_of_edge_data"] += result.audit["core_reads_of_edge_data"]
            audit_totals["max_memory_size"] = max(audit_totals["max_memory_size"],
                                                  max(r.memory_size for r in result.records))
            runs_meta.append({"run": label, "seed": seed, "csv": f"{stem}.csv", "summary": f"{stem}.json",
                              "csv_sha256": _sha256(text), "config": cfg.resolved()})
            log.info("%s seed %d: final %.4f (%.1fs)", label, seed, result.records[-1].core_test_acc,
                     time.perf_counter() - started)
    agg = aggregate(csv_by_label)
    agg["preset"] = preset.name
    agg["audit"] = audit_totals
    (out / AGGREGATE_NAME).write_text(json.dumps(agg, indent=2))
    manifest = {
        "tool": "edgekd",
        "version": __version__,
        "preset": preset.name,
        "seeds": preset.seeds,
        "threads": threads,
        "golden": threads <= 1,
        "runs": runs_meta,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def run_experiment(preset: str | ExperimentPreset, output_dir: str | Path, seeds: list[int] | None = None,
                   threads: int = 1, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Run a preset for every seed and write CSVs, summaries, aggregate and manifest."""
    if isinstance(preset, str):
        preset = get_preset(preset, seeds, overrides)
    elif seeds:
        preset.seeds = list(seeds)
    return _execute(preset, Path(output_dir), threads)


@dataclass
class ReplayReport:
    compared: int
    mismatches: list[str]
    skipped: bool = False

    @property
    def ok(self) -> bool:
        return not self.mismatches


def replay(manifest_path: str | Path, output_dir: str | Path | None = None, threads: int = 1) -> ReplayReport:
    """Re-run every config in a manifest and compare CSV bytes with the recorded hashes.

    With ``threads > 1``, or a manifest produced multi-threaded, the runs are
    repeated but not compared.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    skipped = threads > 1 or not manifest.get("golden", True)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mismatches = []
    for run in manifest["runs"]:
        cfg = build_config(run["config"])
        text = mx.records_to_csv(run_simulation(cfg, threads=threads).records)
        if out is not None:
            (out / run["csv"]).write_text(text)
        if not skipped and _sha256(text) != run["csv_sha256"]:
            mismatches.append(run["csv"])
    return ReplayReport(len(manifest["runs"]), mismatches, skipped)
