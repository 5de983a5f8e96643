"""Phase losses and teacher preparation for cloned knowledge distillation.

The composite objective used when re-collected edge models teach the core is

    core_loss_weight * CE(student, y) + t**2 * sum_m w_m * KL(teacher_m || student)

with both distributions softened by ``t`` (the usual Hinton convention). With
``asymmetric_softening=True`` a single-softening variant is used instead: the
student's plain softmax is the first KL argument and only the teacher logits
are divided by ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import nn
from .nn import Model

Mode = Literal["cloned", "independent", "scratch"]
MODES = ("cloned", "independent", "scratch")


@dataclass
class DistillConfig:
    temperature: float = 3.0
    memory_size: int = 3
    core_loss_weight: float = 1.0
    mode: Mode = "cloned"
    asymmetric_softening: bool = False
    min_delta: float = 1e-5
    patience: int = 5

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.memory_size < 0:
            raise ValueError("memory_size must be non-negative")
        if not self.core_loss_weight > 0:
            raise ValueError("core_loss_weight must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class Provenance:
    round_index: int
    edge_id: int
    mode: str
    noisy: bool = False
    lagged: bool = False


@dataclass
class TeacherSet:
    """Frozen teachers, each contributing one weighted KL term.

    Weights default to 1. A memory artifact holding an ensemble is entered with
    weight ``1/len(ensemble)`` per member, so each past round counts once.
    """

    teachers: list[Model]
    provenance: list[Provenance | None] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.teachers:
            raise ValueError("a teacher set needs at least one teacher")
        if not self.provenance:
            self.provenance = [None] * len(self.teachers)
        if not self.weights:
            self.weights = [1.0] * len(self.teachers)
        if not len(self.provenance) == len(self.weights) == len(self.teachers):
            raise ValueError("teachers, provenance and weights must align")

    def __len__(self) -> int:
        return len(self.teachers)

    @property
    def effective_size(self) -> float:
        return float(sum(self.weights))

    def check_compatible(self, student: Model) -> None:
        for i, teacher in enumerate(self.teachers):
            if not teacher.compatible_with(student):
                raise ValueError(
                    f"teacher {i} is {teacher.layer_dims}/{teacher.activation}, "
                    f"student is {student.layer_dims}/{student.activation}"
                )


def core_loss(student: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("core data is empty")
    return nn.cross_entropy(nn.forward(student, inputs), labels)


def edge_loss(edge_model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Hard-label loss of one edge model on its own partition."""
    if len(labels) == 0:
        raise ValueError("edge data is empty")
    return nn.cross_entropy(nn.forward(edge_model, inputs), labels)


def distill_term(student: Model, teachers: TeacherSet, inputs: np.ndarray, cfg: DistillConfig) -> float:
    """``t**2 * sum_m w_m * KL`` evaluated with the nn primitives."""
    teachers.check_compatible(student)
    t = cfg.temperature
    s_logits = nn.forward(student, inputs)
    total = 0.0
    for teacher, w in zip(teachers.teachers, teachers.weights):
        t_logits = nn.forward(teacher, inputs)
        if cfg.asymmetric_softening:
            kl = nn.kl_divergence(nn.softmax_with_temperature(s_logits, 1.0),
                                  nn.softmax_with_temperature(t_logits, t))
        else:
            kl = nn.kl_divergence(nn.softmax_with_temperature(t_logits, t),
                                  nn.softmax_with_temperature(s_logits, t))
        total += w * kl
    return t * t * total


def distill_loss(student: Model, teachers: TeacherSet, inputs: np.ndarray,
                 labels: np.ndarray, cfg: DistillConfig) -> float:
    return cfg.core_loss_weight * core_loss(student, inputs, labels) + distill_term(
        student, teachers, inputs, cfg
    )


class DistillLoss:
    """Composite objective as an ``nn.Loss`` for ``train_sgd``.

    Teacher outputs on the whole core set are computed once at construction;
    teachers receive no gradient and are never touched afterwards.
    """

    def __init__(self, teachers: TeacherSet, inputs: np.ndarray, cfg: DistillConfig) -> None:
        self.cfg = cfg
        t = cfg.temperature
        probs = [nn.softmax_with_temperature(nn.forward(m, inputs), t) for m in teachers.teachers]
        self.weights = np.asarray(teachers.weights, dtype=np.float64)
        if cfg.asymmetric_softening:
            self._log_probs = [np.log(np.maximum(p, nn.KL_FLOOR)) for p in probs]
        else:
            # sum_m w_m KL(p_m || s) = sum_m w_m sum p_m log p_m - sum (sum_m w_m p_m) log s
            self._mix = sum(w * p for w, p in zip(self.weights, probs))
            self._neg_entropy = sum(
                w * np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
                for w, p in zip(self.weights, probs)
            )
        self._ce = nn.CrossEntropyLoss()

    def __call__(self, logits, labels, idx):
        cfg = self.cfg
        t = cfg.temperature
        n = len(idx)
        ce_value, ce_grad = self._ce(logits, labels)
        if cfg.asymmetric_softening:
            logs = nn.log_softmax(logits)
            s = np.exp(logs)
            kl_value = 0.0
            kl_grad = np.zeros_like(logits)
            for w, logp_all in zip(self.weights, self._log_probs):
                g = logs - logp_all[idx]
                per_row = (s * g).sum(axis=1)
                kl_value += w * per_row.mean()
                kl_grad += w * s * (g - per_row[:, None])
            kl_grad /= n
        else:
            log_s = nn.log_softmax(logits, t)
            mix = self._mix[idx]
            per_row = self._neg_entropy[idx] - (mix * log_s).sum(axis=1)
            kl_value = per_row.mean()
            kl_grad = (self.weights.sum() * np.exp(log_s) - mix) / (t * n)
        value = cfg.core_loss_weight * ce_value + t * t * kl_value
        grad = cfg.core_loss_weight * ce_grad + t * t * kl_grad
        return float(value), grad


def prepare_teacher(core_model: Model, mode: Mode, rng_seed: int) -> Model:
    """Initial edge model for one expedition.

    ``cloned`` copies the core bit for bit. ``independent`` and ``scratch`` both
    draw a fresh initialisation of the same architecture; the caller decides
    whether that model first learns from the core data (independent) or goes
    straight to the edge (scratch).
    """
    if mode == "cloned":
        return core_model.clone()
    if mode in ("independent", "scratch"):
        return nn.init_model(core_model.layer_dims, rng_seed, core_model.activation)
    raise ValueError(f"unknown teacher mode {mode!r}")


def distill_phase(student: Model, teachers: TeacherSet, inputs: np.ndarray, labels: np.ndarray,
                  cfg: DistillConfig, schedule: nn.TrainSchedule,
                  rng_seed: int = 0) -> tuple[Model, nn.TrainHistory]:
    """Train the student on the composite loss, restarting the LR schedule."""
    teachers.check_compatible(student)
    if len(labels) == 0:
        raise ValueError("core data is empty")
    loss = DistillLoss(teachers, inputs, cfg)
    return nn.train_sgd(student, inputs, labels, schedule, loss, rng_seed,
                        early_stop=(cfg.min_delta, cfg.patience))
