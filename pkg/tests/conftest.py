from __future__ import annotations

import numpy as np
import pytest

from edgekd import nn


def finite_difference(model: nn.Model, x, y, loss=None, h: float = 1e-5) -> nn.Gradients:
    """Central differences over every parameter, independent of ``backward``."""
    loss = loss or nn.CrossEntropyLoss()
    idx = np.arange(len(x))

    def value(m):
        return loss(nn.forward(m, x), y, idx)[0]

    out_w, out_b = [], []
    for group, out in ((model.weights, out_w), (model.biases, out_b)):
        for li, param in enumerate(group):
            grad = np.zeros_like(param)
            for pos in np.ndindex(param.shape):
                orig = param[pos]
                param[pos] = orig + h
                up = value(model)
                param[pos] = orig - h
                down = value(model)
                param[pos] = orig
                grad[pos] = (up - down) / (2 * h)
            out.append(grad)
    return nn.Gradients(out_w, out_b)


def max_rel_error(analytic: nn.Gradients, numeric: nn.Gradients, floor: float = 1e-6) -> float:
    a, b = analytic.flat(), numeric.flat()
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def blobs(n_per_class=50, seed=0, sep=6.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per_class, 2)) + [-sep / 2, 0]
    b = rng.normal(size=(n_per_class, 2)) + [sep / 2, 0]
    x = np.vstack([a, b])
    y = np.repeat([0, 1], n_per_class)
    return x, y
