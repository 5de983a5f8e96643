"""Accuracy, prediction intersection/consensus and per-round records."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .data import LabeledSet
from .nn import Model

CSV_COLUMNS = (
    "round", "variant", "core_test_acc", "edge_test_acc", "core_train_acc",
    "consensus_current", "consensus_edge1", "delta_mutual", "delta_exclusive",
    "transfer_score", "noisy_flag", "spike_flag", "memory_size",
)


@dataclass(frozen=True)
class PredictionSet:
    correct: frozenset[int]
    total: int

    def __post_init__(self) -> None:
        if len(self.correct) > self.total:
            raise ValueError("more correct ids than evaluated samples")

    def __len__(self) -> int:
        return len(self.correct)

    @property
    def accuracy(self) -> float:
        return len(self.correct) / self.total if self.total else float("nan")


def ensemble_predict(models: Sequence[Model], inputs: np.ndarray) -> np.ndarray:
    """Majority vote; ties go to the lowest class index."""
    if len(models) == 1:
        return nn.predict(models[0], inputs)
    votes = np.stack([nn.predict(m, inputs) for m in models], axis=1)
    n_classes = models[0].n_classes
    counts = np.zeros((len(votes), n_classes), dtype=np.int64)
    for col in votes.T:
        counts[np.arange(len(votes)), col] += 1
    return np.argmax(counts, axis=1)


def prediction_set(model: Model | Sequence[Model], eval_data: LabeledSet) -> PredictionSet:
    if len(eval_data) == 0:
        raise ValueError("evaluation data is empty")
    if isinstance(model, Model):
        pred = nn.predict(model, eval_data.inputs)
    else:
        pred = ensemble_predict(list(model), eval_data.inputs)
    hit = eval_data.ids[pred == eval_data.labels]
    return PredictionSet(frozenset(int(i) for i in hit), len(eval_data))


@dataclass(frozen=True)
class ConsensusReport:
    intersection_size: int
    union_size: int
    consensus: float
    teacher_exclusive: int
    student_exclusive: int


def consensus(teacher_set: PredictionSet, student_set: PredictionSet) -> ConsensusReport:
    """Intersection over union of the two correct-prediction sets."""
    if teacher_set.total != student_set.total:
        raise ValueError("prediction sets come from different evaluation populations")
    t, s = teacher_set.correct, student_set.correct
    inter = len(t & s)
    union = len(t | s)
    return ConsensusReport(
        intersection_size=inter,
        union_size=union,
        consensus=inter / union if union else 0.0,
        teacher_exclusive=len(t - s),
        student_exclusive=len(s - t),
    )


def area_deltas(student_before: PredictionSet, student_after: PredictionSet,
                teacher: PredictionSet) -> tuple[int, int]:
    """Change of the mutual (shared with teacher) and exclusive (student-only) areas."""
    t = teacher.correct
    d_mutual = len(student_after.correct & t) - len(student_before.correct & t)
    d_exclusive = len(student_after.correct - t) - len(student_before.correct - t)
    return d_mutual, d_exclusive


def edge_transfer_score(core_before: Model, core_after: Model, edge_holdout: LabeledSet) -> float:
    if len(edge_holdout) == 0:
        return float("nan")
    x, y = edge_holdout.inputs, edge_holdout.labels
    return nn.accuracy(core_after, x, y) - nn.accuracy(core_before, x, y)


def overfit_spike_detector(train_acc_trace: Sequence[float], threshold: float = 0.15,
                           window: int = 3) -> list[bool]:
    """Flag rounds whose accuracy exceeds the median of the previous ``window`` rounds by ``threshold``.

    The first entry has no history and is never flagged.
    """
    trace = [float(v) for v in train_acc_trace]
    if not trace:
        raise ValueError("empty accuracy trace")
    flags = []
    for i, value in enumerate(trace):
        history = [v for v in trace[max(0, i - window):i] if not math.isnan(v)]
        flags.append(bool(history) and value - float(np.median(history)) > threshold)
    return flags


@dataclass
class RoundRecord:
    round_index: int
    variant: str = ""
    edge_id: int | None = None
    core_test_acc: float = float("nan")
    edge_test_acc: float = float("nan")
    core_train_acc: float = float("nan")
    consensus_current: float = float("nan")
    consensus_at_uplink: float = float("nan")
    consensus_edge1: float = float("nan")
    delta_mutual: int | None = None
    delta_exclusive: int | None = None
    correct_before: int | None = None
    correct_after: int | None = None
    transfer_score: float = float("nan")
    noisy_flag: bool = False
    lagged_flag: bool = False
    spike_flag: bool = False
    memory_size: int = 0
    teacher_count: int = 0
    distill_epochs: int = 0
    time: int = 0

    def csv_row(self) -> dict:
        def num(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)

        return {
            "round": str(self.round_index),
            "variant": self.variant,
            "core_test_acc": num(self.core_test_acc),
            "edge_test_acc": num(self.edge_test_acc),
            "core_train_acc": num(self.core_train_acc),
            "consensus_current": num(self.consensus_current),
            "consensus_edge1": num(self.consensus_edge1),
            "delta_mutual": num(self.delta_mutual),
            "delta_exclusive": num(self.delta_exclusive),
            "transfer_score": num(self.transfer_score),
            "noisy_flag": str(int(self.noisy_flag)),
            "spike_flag": str(int(self.spike_flag)),
            "memory_size": str(self.memory_size),
        }

    def to_json(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[key] = None if isinstance(value, float) and math.isnan(value) else value
        return out


def records_to_csv(records: Iterable[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    """Parse a round CSV back into typed dicts (empty cells become ``nan``)."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: dict = {}
        for key, value in raw.items():
            if key == "variant":
                row[key] = value
            elif key in ("round", "noisy_flag", "spike_flag", "memory_size"):
                row[key] = int(value)
            else:
                row[key] = float(value) if value != "" else float("nan")
        rows.append(row)
    return rows


def record_field_names() -> list[str]:
    return [f.name for f in fields(RoundRecord)]
