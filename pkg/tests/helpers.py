"""Independent oracles used by several test modules."""
from __future__ import annotations

import math

import numpy as np

from trapper.tinynet import Loss, Network, conv1d, dense, flatten, relu


def random_network(rng: np.random.Generator, seed: int):
    """A small random stack exercising every layer kind, with a matching input and target."""
    n = int(rng.integers(1, 4))
    loss = Loss.MEAN_SQUARED_ERROR if rng.random() < 0.5 else Loss.SOFTMAX_CROSS_ENTROPY
    specs = []
    if rng.random() < 0.6:
        c, length = int(rng.integers(1, 4)), int(rng.integers(3, 9))
        x = rng.normal(size=(n, c, length))
        for _ in range(int(rng.integers(1, 3))):
            c_out, k, s = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
            specs += [conv1d(c, c_out, k, s), relu()]
            c, length = c_out, math.ceil(length / s)
        specs.append(flatten())
        width = c * length
    else:
        width = int(rng.integers(1, 7))
        x = rng.normal(size=(n, width))
    for _ in range(int(rng.integers(0, 2))):
        h = int(rng.integers(2, 7))
        specs += [dense(width, h), relu()]
        width = h
    n_out = int(rng.integers(2, 6))
    specs.append(dense(width, n_out))
    net = Network(specs, seed=seed)
    # push biases off zero so ReLU kinks are not sitting at the evaluation point
    for p in net.parameters():
        if p.ndim == 1:
            p[:] = rng.normal(scale=0.1, size=p.shape)
    if loss is Loss.MEAN_SQUARED_ERROR:
        target = rng.normal(size=(n, n_out))
    else:
        target = rng.integers(0, n_out, size=n)
    return net, x, target, loss


def finite_difference_check(net: Network, x, target, loss: Loss, h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences over every
    parameter tensor and the input gradient (norm-wise per tensor)."""
    out = net.forward(x)
    _, g = loss.fn(out, target)
    analytic = [a.copy() for a in net.backward(g)] + [net.input_grad.copy()]

    def f():
        return loss.fn(net.predict(x), target)[0]

    tensors = net.parameters() + [x]
    worst = 0.0
    for p, a in zip(tensors, analytic):
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            num[i] = (fp - fm) / (2 * h)
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.linalg.norm(a - num) / scale))
    return worst


def spearman(x, y) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(x, y).statistic)
