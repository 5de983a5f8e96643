"""Scenario configuration: schema, defaults, strict validation and YAML I/O."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

VARIANTS = ("IsPP", "IPP", "IEP", "IPM", "CPP", "CEP", "CPM", "CEM")
Variant = Literal["IsPP", "IPP", "IEP", "IPM", "CPP", "CEP", "CPM", "CEM"]
LagPolicy = Literal["use_on_arrival", "abort", "no_lag"]

DEFAULT_ENSEMBLE = 3
DEFAULT_MEMORY = 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSpec(_Strict):
    class_count: int = Field(10, gt=1)
    samples_per_class: int = Field(600, gt=0)
    test_per_class: int = Field(200, gt=0)
    input_dim: int = Field(20, gt=0)
    difficulty: float = Field(0.35, ge=0.0, le=1.0)
    clusters_per_class: int = Field(4, gt=0)
    # data and partition come from this seed; the run seed only drives training
    seed: int = 0


class PartitionSpec(_Strict):
    edges: int = Field(9, ge=0)
    core_fraction: float | None = Field(None, gt=0.0, le=1.0)
    jitter: float = Field(6.9 / 50.0, ge=0.0)
    holdout_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    # None: the split is redrawn from the run seed
    seed: int | None = None


class ModelSpec(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    activation: Literal["relu", "tanh"] = "relu"

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v: list[int]) -> list[int]:
        if any(h <= 0 for h in v):
            raise ValueError("hidden layer widths must be positive")
        return v


class ScheduleSpec(_Strict):
    epochs: int = Field(30, ge=0)
    base_lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(32, gt=0)
    decay_factor: float = Field(0.1, gt=0.0, lt=1.0)
    decay_milestones: list[int] | None = None

    @model_validator(mode="after")
    def _milestones(self):
        ms = self.decay_milestones
        if ms is not None:
            if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 or m >= self.epochs for m in ms):
                raise ValueError("decay_milestones must be strictly increasing and < epochs")
        return self


def _distill_default() -> ScheduleSpec:
    return ScheduleSpec(epochs=60, base_lr=0.005)


class TrainingSpec(_Strict):
    core: ScheduleSpec = Field(default_factory=ScheduleSpec)
    # edge falls back to the core schedule when unset
    edge: ScheduleSpec | None = None
    distill: ScheduleSpec = Field(default_factory=_distill_default)


class DistillSpec(_Strict):
    temperature: float = Field(3.0, gt=0.0)
    core_loss_weight: float = Field(1.0, gt=0.0)
    asymmetric_softening: bool = False
    min_delta: float = Field(1e-5, ge=0.0)
    patience: int = Field(5, gt=0)


class LagSpec(_Strict):
    policy: LagPolicy = "use_on_arrival"
    delays: dict[int, int] = Field(default_factory=dict)

    @field_validator("delays")
    @classmethod
    def _non_negative(cls, v: dict[int, int]) -> dict[int, int]:
        for edge, delay in v.items():
            if delay < 0:
                raise ValueError(f"delay for edge {edge} must be >= 0")
        return v


class NoiseConfig(_Strict):
    p: float = Field(0.0, ge=0.0, le=1.0)
    edges: list[int] = Field(default_factory=list)


class TimelineEntry(_Strict):
    edge: int = Field(gt=0)
    time: int = Field(ge=0)


class TimelineSpec(_Strict):
    phase1_ticks: int = Field(1, ge=0)
    arrival_spacing: int | None = Field(None, ge=0)
    order: list[int] | None = None
    arrivals: list[TimelineEntry] | None = None
    departures: list[TimelineEntry] = Field(default_factory=list)


class MetricsSpec(_Strict):
    spike_window: int = Field(3, gt=0)
    spike_threshold: float = Field(0.02, gt=0.0)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    variant: Variant = "CEM"
    seed: int = 1
    ensemble_size: int | None = Field(None, ge=1)
    memory_size: int | None = Field(None, ge=0)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    partition: PartitionSpec = Field(default_factory=PartitionSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    distill: DistillSpec = Field(default_factory=DistillSpec)
    lag: LagSpec = Field(default_factory=LagSpec)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    timeline: TimelineSpec = Field(default_factory=TimelineSpec)
    metrics: MetricsSpec = Field(default_factory=MetricsSpec)

    @model_validator(mode="after")
    def _edges_exist(self):
        k = self.partition.edges
        referenced = {"lag.delays": list(self.lag.delays), "noise.edges": self.noise.edges,
                      "timeline.order": self.timeline.order or [],
                      "timeline.arrivals": [a.edge for a in self.timeline.arrivals or []],
                      "timeline.departures": [d.edge for d in self.timeline.departures]}
        for where, ids in referenced.items():
            bad = [e for e in ids if not 1 <= e <= k]
            if bad:
                raise ValueError(f"{where} names unknown edges {bad} (edges are 1..{k})")
        if self.timeline.order is not None and sorted(self.timeline.order) != sorted(set(self.timeline.order)):
            raise ValueError("timeline.order lists an edge twice")
        return self

    # variant letters: mode (Is/I/C), Phase 1 (P/E), Phase 2 (P/M)
    @property
    def mode(self) -> str:
        if self.variant.startswith("Is"):
            return "scratch"
        return "cloned" if self.variant.startswith("C") else "independent"

    @property
    def resolved_ensemble_size(self) -> int:
        if self.ensemble_size is not None:
            return self.ensemble_size
        return DEFAULT_ENSEMBLE if self.variant[-2] == "E" else 1

    @property
    def resolved_memory_size(self) -> int:
        if self.memory_size is not None:
            return self.memory_size
        return DEFAULT_MEMORY if self.variant[-1] == "M" else 0

    @property
    def teacher_set_ceiling(self) -> int:
        return self.resolved_ensemble_size + self.resolved_memory_size

    def edge_schedule(self) -> ScheduleSpec:
        return self.training.edge or self.training.core

    def distill_schedule(self) -> ScheduleSpec:
        return self.training.distill

    def resolved(self) -> dict[str, Any]:
        """Every field made explicit, plus the derived quantities."""
        out = self.model_dump(mode="json")
        out["ensemble_size"] = self.resolved_ensemble_size
        out["memory_size"] = self.resolved_memory_size
        out["training"]["edge"] = self.edge_schedule().model_dump(mode="json")
        out["training"]["distill"] = self.distill_schedule().model_dump(mode="json")
        out["derived"] = {"mode": self.mode, "teacher_set_ceiling": self.teacher_set_ceiling}
        return out

    def with_overrides(self, overrides: dict[str, Any]) -> ScenarioConfig:
        return build_config(deep_merge(self.model_dump(mode="json"), overrides))


def deep_merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _strip_derived(raw: dict) -> dict:
    raw = dict(raw)
    raw.pop("derived", None)
    return raw


def build_config(raw: dict | None, lines: dict[tuple, int] | None = None) -> ScenarioConfig:
    raw = _strip_derived(raw or {})
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        issues = []
        for err in exc.errors():
            loc = tuple(str(p) for p in err["loc"])
            issues.append({
                "field": ".".join(loc) or "<root>",
                "value": err.get("input") if err["type"] != "missing" else None,
                "constraint": err["msg"],
                "line": _line_for(loc, lines or {}),
            })
        raise ConfigError(issues) from None


def _line_for(loc: tuple, lines: dict[tuple, int]) -> int | None:
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return None


def _node_lines(node, prefix=()) -> dict[tuple, int]:
    out: dict[tuple, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[path] = key_node.start_mark.line + 1
            out.update(_node_lines(value_node, path))
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (str(i),)
            out[path] = item.start_mark.line + 1
            out.update(_node_lines(item, path))
    return out


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse a YAML (or JSON) scenario file; errors carry line numbers."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([{"field": "<file>", "value": str(path), "constraint": f"not valid YAML: {exc}",
                            "line": mark.line + 1 if mark else None}]) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([{"field": "<root>", "value": type(raw).__name__,
                            "constraint": "top level must be a mapping", "line": 1}])
    return build_config(raw, _node_lines(node) if node is not None else {})


def validate_config(path: str | Path) -> dict[str, Any]:
    """Resolved config for a file, or ``ConfigError`` listing every problem."""
    return load_config(path).resolved()


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.resolved(), sort_keys=False)
