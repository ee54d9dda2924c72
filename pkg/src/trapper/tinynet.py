"""Small float64 network substrate: Dense, Conv1d, ReLU, Flatten.

Everything is batched.  Dense takes ``(N, features)``; Conv1d takes
``(N, channels, length)`` and pads with zeros so that stride 1 keeps the
length.  ``Network.forward`` caches what ``backward`` needs; calling backward
without a cached forward raises :class:`UsageError`.
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, TrainingDiverged, UsageError
from .fileio import read_container, write_container


class LayerKind(enum.Enum):
    DENSE = "Dense"
    CONV1D = "Conv1d"
    RELU = "ReLU"
    FLATTEN = "Flatten"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int = 0          # features (Dense) or channels (Conv1d)
    out_dim: int = 0
    kernel: int = 1
    stride: int = 1
    init_scale: float = 1.0

    def __post_init__(self):
        if self.kind is LayerKind.DENSE and (self.in_dim < 1 or self.out_dim < 1):
            raise ConfigError("Dense needs in_dim >= 1 and out_dim >= 1")
        if self.kind is LayerKind.CONV1D:
            if self.kernel < 1 or self.stride < 1:
                raise ConfigError("Conv1d needs kernel >= 1 and stride >= 1")
            if self.in_dim < 1 or self.out_dim < 1:
                raise ConfigError("Conv1d needs at least one input and output channel")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{**d, "kind": LayerKind(d["kind"])})


def dense(n_in: int, n_out: int, init_scale: float = 1.0) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, n_in, n_out, init_scale=init_scale)


def conv1d(c_in: int, c_out: int, kernel: int, stride: int = 1, init_scale: float = 1.0) -> LayerSpec:
    return LayerSpec(LayerKind.CONV1D, c_in, c_out, kernel, stride, init_scale)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self, spec: LayerSpec, index: int):
        self.spec = spec
        self.index = index
        self.params = {}
        self.grads = {}
        self._cache = None

    @property
    def name(self) -> str:
        return f"layer {self.index} ({self.spec.kind.value})"

    def _shape_error(self, expected: str, got) -> ShapeError:
        return ShapeError(f"{self.name}: expected input {expected}, got {tuple(got)}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, spec, index, rng):
        super().__init__(spec, index)
        bound = spec.init_scale / math.sqrt(spec.in_dim)
        self.params = {
            "W": rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim)),
            "b": np.zeros(spec.out_dim),
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise self._shape_error(f"(N, {self.spec.in_dim})", x.shape)
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        x = self._cache
        self.grads = {"W": x.T @ g, "b": g.sum(axis=0)}
        return g @ self.params["W"].T


def _pads(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


class Conv1d(Layer):
    """Cross-correlation with zero padding; output length ceil(L / stride)."""

    def __init__(self, spec, index, rng):
        super().__init__(spec, index)
        bound = spec.init_scale / math.sqrt(spec.in_dim * spec.kernel)
        self.params = {
            "W": rng.uniform(-bound, bound, (spec.out_dim, spec.in_dim, spec.kernel)),
            "b": np.zeros(spec.out_dim),
        }

    def forward(self, x):
        s = self.spec
        if x.ndim != 3 or x.shape[1] != s.in_dim:
            raise self._shape_error(f"(N, {s.in_dim}, L)", x.shape)
        left, right = _pads(s.kernel)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        cols = sliding_window_view(xp, s.kernel, axis=2)[:, :, ::s.stride, :]  # (N, C, Lout, k)
        self._cache = (x.shape, cols)
        out = np.einsum("nclk,ock->nol", cols, self.params["W"], optimize=True)
        return out + self.params["b"][None, :, None]

    def backward(self, g):
        s = self.spec
        shape, cols = self._cache
        self.grads = {
            "W": np.einsum("nclk,nol->ock", cols, g, optimize=True),
            "b": g.sum(axis=(0, 2)),
        }
        dcols = np.einsum("ock,nol->nclk", self.params["W"], g, optimize=True)
        left, right = _pads(s.kernel)
        n, c, length = shape
        dxp = np.zeros((n, c, length + left + right))
        lout = g.shape[2]
        for j in range(s.kernel):
            dxp[:, :, j:j + s.stride * (lout - 1) + 1:s.stride] += dcols[..., j]
        return dxp[:, :, left:left + length]


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, g):
        return np.where(self._cache, g, 0.0)


class Flatten(Layer):
    def forward(self, x):
        if x.ndim < 2:
            raise self._shape_error("(N, ...)", x.shape)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._cache)


def _make_layer(spec: LayerSpec, index: int, rng) -> Layer:
    if spec.kind is LayerKind.DENSE:
        return Dense(spec, index, rng)
    if spec.kind is LayerKind.CONV1D:
        return Conv1d(spec, index, rng)
    if spec.kind is LayerKind.RELU:
        return ReLU(spec, index)
    return Flatten(spec, index)


class Network:
    def __init__(self, specs: Sequence[LayerSpec], seed: int = 0):
        if not specs:
            raise ConfigError("a network needs at least one layer")
        rng = np.random.default_rng(seed)
        self.specs = tuple(specs)
        self.layers = [_make_layer(s, i, rng) for i, s in enumerate(self.specs)]
        self.forward_passes = 0
        self._has_forward = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        self.forward_passes += 1
        self._has_forward = True
        return x

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward without keeping the cache flag armed for backward."""
        out = self.forward(x)
        self._has_forward = False
        return out

    def backward(self, loss_grad: np.ndarray) -> list[np.ndarray]:
        """Gradients for every parameter, ordered like :meth:`parameters`."""
        if not self._has_forward:
            raise UsageError("backward called without a cached forward pass")
        g = np.asarray(loss_grad, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._has_forward = False
        self.input_grad = g
        return [layer.grads[k] for layer, k in self.parameter_keys()]

    def parameter_keys(self) -> list[tuple[Layer, str]]:
        return [(layer, k) for layer in self.layers for k in sorted(layer.params)]

    def parameters(self) -> list[np.ndarray]:
        return [layer.params[k] for layer, k in self.parameter_keys()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Network":
        out = copy.deepcopy(self)
        out._has_forward = False
        for layer in out.layers:
            layer._cache = None
        return out

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {}
        for layer, k in self.parameter_keys():
            arrays[f"{layer.index}.{k}"] = layer.params[k]
        header = {"layers": [s.to_dict() for s in self.specs], "extra": meta or {}}
        write_container(path, "network", header, arrays)

    @classmethod
    def load(cls, path) -> tuple["Network", dict]:
        header, arrays = read_container(path, kind="network")
        net = cls([LayerSpec.from_dict(d) for d in header["layers"]], seed=0)
        for layer, k in net.parameter_keys():
            a = arrays[f"{layer.index}.{k}"]
            if a.shape != layer.params[k].shape:
                raise ShapeError(f"{layer.name}: stored {k} has shape {a.shape}, "
                                 f"expected {layer.params[k].shape}")
            layer.params[k] = a.copy()
        return net, header["extra"]


# ---------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[target] and its gradient w.r.t. the logits.

    Accepts a single 1-D logit vector with an integer class, or a batch
    ``(N, C)`` with ``(N,)`` classes.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= z.shape[1]):
        raise ShapeError(f"class index out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = float(np.mean(lse - shifted[rows, t]))
    grad = softmax(z)
    grad[rows, t] -= 1.0
    grad /= len(t)
    return loss, (grad[0] if single else grad)


def mean_squared_error(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Loss(enum.Enum):
    SOFTMAX_CROSS_ENTROPY = "SoftmaxCrossEntropy"
    MEAN_SQUARED_ERROR = "MeanSquaredError"

    @property
    def fn(self) -> Callable:
        return softmax_cross_entropy if self is Loss.SOFTMAX_CROSS_ENTROPY else mean_squared_error


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    loss: Loss = Loss.MEAN_SQUARED_ERROR
    optimizer: str = "sgd"   # "sgd" or "adam"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    network: Network
    initial_loss: float
    losses: list[float] = field(default_factory=list)   # mean batch loss per epoch
    final_loss: float = float("nan")


def evaluate_loss(net: Network, x: np.ndarray, y: np.ndarray, loss: Loss, batch_size: int = 512) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = net.predict(x[i:i + batch_size])
        val, _ = loss.fn(out, y[i:i + batch_size])
        total += val * len(out)
    return total / len(x)


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainReport:
    """Mini-batch training on a private copy of ``net``; the input is not modified."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ConfigError("empty training set")
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} inputs but {len(y)} targets")
    model = net.copy()
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(model, evaluate_loss(model, x, y, cfg.loss))
    params = model.parameters()
    adam = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            out = model.forward(x[idx])
            loss, grad = cfg.loss.fn(out, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} is probably too high")
            grads = model.backward(grad)
            if adam is not None:
                adam.step(params, grads)
            else:
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
            total += loss * len(idx)
        report.losses.append(total / len(x))
        if on_epoch is not None:
            on_epoch(epoch, report.losses[-1])
    report.final_loss = evaluate_loss(model, x, y, cfg.loss)
    if not math.isfinite(report.final_loss):
        raise TrainingDiverged("non-finite loss after training")
    return report
