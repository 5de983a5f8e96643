"""Dense feed-forward classifiers with hand-written backpropagation.

Everything here operates on plain numpy arrays. Inputs are ``(batch, features)``
matrices; weights are stored as ``(fan_in, fan_out)`` so a layer is
``x @ W + b``. Hidden layers apply the model's activation, the output layer is
linear and yields raw logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TrainingDivergence

ACTIVATIONS = ("relu", "tanh")
SNAPSHOT_VERSION = 1
KL_FLOOR = 1e-12


@dataclass
class Model:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise DimensionError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DimensionError("one weight matrix and one bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected:
                raise DimensionError(f"layer {i} weight has shape {w.shape}, expected {expected}")
            if b.shape != (expected[1],):
                raise DimensionError(f"layer {i} bias has shape {b.shape}, expected {(expected[1],)}")
        self.check_finite()

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def check_finite(self) -> None:
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError("model parameters contain NaN or Inf")

    def compatible_with(self, other: Model) -> bool:
        return self.layer_dims == other.layer_dims and self.activation == other.activation

    def clone(self) -> Model:
        return Model(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def param_equal(self, other: Model) -> bool:
        """Bitwise parameter equality."""
        if not self.compatible_with(other):
            return False
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def init_model(layer_dims: Sequence[int], seed: int, activation: str = "relu") -> Model:
    """Fan-in scaled uniform initialisation with zero biases."""
    rng = np.random.default_rng(seed)
    gain = 6.0 if activation == "relu" else 3.0
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(gain / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Model(list(layer_dims), weights, biases, activation)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(z.dtype)
    return 1.0 - a * a


def _as_inputs(model: Model, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionError(
            f"inputs have shape {x.shape}, model expects (*, {model.layer_dims[0]})"
        )
    return x


def _forward_cache(model: Model, x: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if i < last:
            out = _activate(z, model.activation)
        else:
            out = z
        cache.append((a, z, out))
        a = out
    if not np.all(np.isfinite(a)):
        raise NumericError("forward pass produced non-finite logits")
    return a, cache


def forward(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Raw logits of shape ``(batch, n_classes)``."""
    logits, _ = _forward_cache(model, _as_inputs(model, inputs))
    return logits


def predict(model: Model, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(forward(model, inputs), axis=1)


def log_softmax(logits: np.ndarray, t: float = 1.0) -> np.ndarray:
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_with_temperature(logits: np.ndarray, t: float = 1.0) -> np.ndarray:
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class."""
    logits = np.atleast_2d(logits)
    y = _check_labels(labels, logits.shape[1])
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(y)), y].mean())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Batch mean of ``sum p * log(p / q)`` with ``0 log 0 = 0``.

    ``q`` is floored at ``KL_FLOOR`` so a zero where ``p > 0`` stays finite.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise DimensionError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    logq = np.log(np.maximum(q, KL_FLOOR))
    terms = np.where(pos, p * (logp - logq), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


class Loss(Protocol):
    """A training objective over a minibatch.

    ``idx`` holds the positions of the batch rows in the full training set so
    losses with per-sample targets (distillation) can look them up.
    """

    def __call__(
        self, logits: np.ndarray, labels: np.ndarray, idx: np.ndarray
    ) -> tuple[float, np.ndarray]: ...


class CrossEntropyLoss:
    """Hard-label cross entropy; returns the loss and d(loss)/d(logits)."""

    def __call__(self, logits, labels, idx=None):
        y = _check_labels(labels, logits.shape[1])
        n = len(y)
        logp = log_softmax(logits)
        value = float(-logp[np.arange(n), y].mean())
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return value, grad / n


def backward(model: Model, cache: list, dlogits: np.ndarray) -> Gradients:
    n_layers = len(model.weights)
    dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = dlogits
    for i in range(n_layers - 1, -1, -1):
        a_in, z, out = cache[i]
        if i < n_layers - 1:
            delta = delta * _activate_grad(z, out, model.activation)
        dws[i] = a_in.T @ delta
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
    return Gradients(dws, dbs)


def gradient(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    loss: Loss | None = None,
    idx: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Loss value and analytic parameter gradients on one batch."""
    x = _as_inputs(model, inputs)
    if len(x) == 0:
        raise ValueError("gradient needs a nonempty batch")
    loss = loss or CrossEntropyLoss()
    if idx is None:
        idx = np.arange(len(x))
    logits, cache = _forward_cache(model, x)
    value, dlogits = loss(logits, np.asarray(labels), idx)
    return value, backward(model, cache, dlogits)


def loss_value(model, inputs, labels, loss=None, idx=None) -> float:
    x = _as_inputs(model, inputs)
    loss = loss or CrossEntropyLoss()
    if idx is None:
        idx = np.arange(len(x))
    value, _ = loss(forward(model, x), np.asarray(labels), idx)
    return value


def accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, inputs) == np.asarray(labels)))


@dataclass
class TrainSchedule:
    epochs: int = 30
    base_lr: float = 0.1
    decay_milestones: list[int] | None = None
    decay_factor: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.decay_milestones is None:
            self.decay_milestones = sorted({m for m in (self.epochs // 2, (3 * self.epochs) // 4) if 0 < m < self.epochs})
        ms = list(self.decay_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(f"decay_milestones must be strictly increasing and < epochs, got {ms}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.decay_milestones if epoch >= m)
        return self.base_lr * self.decay_factor**passed


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.loss)


def train_sgd(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    schedule: TrainSchedule,
    loss: Loss | None = None,
    rng_seed: int = 0,
    early_stop: tuple[float, int] | None = None,
) -> tuple[Model, TrainHistory]:
    """Minibatch SGD with momentum on a private copy of ``model``.

    Each epoch reshuffles with a generator seeded by ``rng_seed``, so the batch
    order is the only source of randomness. ``early_stop=(min_delta, patience)``
    stops once the epoch loss failed to improve by ``min_delta`` over the last
    ``patience`` epochs.
    """
    x = _as_inputs(model, inputs)
    y = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(y) != len(x):
        raise DimensionError("inputs and labels differ in length")
    loss = loss or CrossEntropyLoss()
    net = model.clone()
    history = TrainHistory()
    if schedule.epochs == 0:
        return net, history
    rng = np.random.default_rng(rng_seed)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    n = len(x)
    bs = schedule.batch_size
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = x[idx]
            try:
                logits, cache = _forward_cache(net, xb)
            except NumericError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
            value, dlogits = loss(logits, y[idx], idx)
            if not np.isfinite(value):
                raise TrainingDivergence(epoch)
            grads = backward(net, cache, dlogits)
            for i in range(len(net.weights)):
                vel_w[i] = schedule.momentum * vel_w[i] + grads.weights[i]
                vel_b[i] = schedule.momentum * vel_b[i] + grads.biases[i]
                net.weights[i] -= lr * vel_w[i]
                net.biases[i] -= lr * vel_b[i]
            total += value * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingDivergence(epoch)
        history.loss.append(epoch_loss)
        history.accuracy.append(correct / n)
        history.lr.append(lr)
        if early_stop is not None:
            min_delta, patience = early_stop
            if len(history.loss) > patience:
                best_before = min(history.loss[:-patience])
                if best_before - min(history.loss[-patience:]) < min_delta:
                    history.stopped_early = True
                    break
    try:
        net.check_finite()
    except NumericError as exc:
        raise TrainingDivergence(history.epochs_run - 1, str(exc)) from exc
    return net, history


def save_model(model: Model, path: str | Path) -> None:
    """Write an ``.npz`` snapshot; float64 arrays round-trip bit-exactly."""
    header = {"format": "edgekd-model", "version": SNAPSHOT_VERSION,
              "layer_dims": model.layer_dims, "activation": model.activation}
    arrays = {"header": np.array(json.dumps(header))}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = np.ascontiguousarray(w)
        arrays[f"b{i}"] = np.ascontiguousarray(b)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "edgekd-model":
            raise ValueError(f"{path} is not a model snapshot")
        if header.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {header.get('version')}")
        n = len(header["layer_dims"]) - 1
        weights = [data[f"W{i}"].copy() for i in range(n)]
        biases = [data[f"b{i}"].copy() for i in range(n)]
    return Model(header["layer_dims"], weights, biases, header["activation"])
