"""Small numpy network with exact backward passes for parameters and inputs.

The feature extractor is a stack of layers (dense, conv, ReLU) followed by a
bias-free linear head that grows as new classes arrive. Everything operates on
2-D ``(batch, features)`` arrays; conv layers reshape internally.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionError,
    LabelError,
    NumericError,
    ShapeError,
    UninitializedHeadError,
)


class Dense:
    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight  # (out, in)
        self.bias = bias

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def backward(self, x, dout, need_params=True):
        dx = dout @ self.weight
        if not need_params:
            return dx, []
        return dx, [dout.T @ x, dout.sum(axis=0)]

    def spec(self) -> dict:
        return {"kind": self.kind}


class ReLU:
    kind = "relu"

    def params(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0)

    def backward(self, x, dout, need_params=True):
        # subgradient at exactly 0 is 0
        return dout * (x > 0), []

    def spec(self) -> dict:
        return {"kind": self.kind}


class Conv2D:
    """Cross-correlation over flattened ``(C, H, W)`` inputs, square kernels."""

    kind = "conv"

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, in_shape: Sequence[int],
                 stride: int = 1, padding: int = 0):
        self.kernel = kernel  # (F, C, k, k)
        self.bias = bias
        self.in_shape = tuple(int(s) for s in in_shape)
        self.stride = int(stride)
        self.padding = int(padding)
        f, c, k, k2 = kernel.shape
        if k != k2 or c != self.in_shape[0]:
            raise DimensionError(f"kernel {kernel.shape} incompatible with input {self.in_shape}")

    @property
    def out_shape(self) -> tuple[int, int, int]:
        _, h, w = self.in_shape
        k = self.kernel.shape[-1]
        ho = (h + 2 * self.padding - k) // self.stride + 1
        wo = (w + 2 * self.padding - k) // self.stride + 1
        return self.kernel.shape[0], ho, wo

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))

    def params(self) -> list[np.ndarray]:
        return [self.kernel, self.bias]

    def _cols(self, x):
        n = x.shape[0]
        x = x.reshape((n,) + self.in_shape)
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        k = self.kernel.shape[-1]
        _, ho, wo = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride][:, :, :ho, :wo]
        # (N, Ho, Wo, C, k, k)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        cols = self._cols(x)
        f = self.kernel.shape[0]
        out = cols @ self.kernel.reshape(f, -1).T + self.bias
        return out.transpose(0, 3, 1, 2).reshape(x.shape[0], -1)

    def backward(self, x, dout, need_params=True):
        n = x.shape[0]
        f, c, k, _ = self.kernel.shape
        _, ho, wo = self.out_shape
        d = dout.reshape(n, f, ho, wo).transpose(0, 2, 3, 1)  # (N, Ho, Wo, F)
        dcols = (d @ self.kernel.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        _, h, w = self.in_shape
        p, s = self.padding, self.stride
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w].reshape(n, -1)
        if not need_params:
            return dx, []
        cols = self._cols(x).reshape(-1, c * k * k)
        dk = (d.reshape(-1, f).T @ cols).reshape(self.kernel.shape)
        return dx, [dk, d.reshape(-1, f).sum(axis=0)]

    def spec(self) -> dict:
        return {"kind": self.kind, "in_shape": list(self.in_shape),
                "stride": self.stride, "padding": self.padding}


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PrototypeMSE:
    """Batch-mean squared L2 distance of embeddings to one prototype."""

    prototype: np.ndarray
    target = "features"

    def __call__(self, feats: np.ndarray) -> tuple[float, np.ndarray]:
        p = np.asarray(self.prototype)
        if p.shape != (feats.shape[1],):
            raise DimensionError(f"prototype shape {p.shape} vs feature dim {feats.shape[1]}")
        diff = feats - p.astype(feats.dtype)
        n = feats.shape[0]
        value = float(np.sum(diff.astype(np.float64) ** 2) / n)
        return value, (2.0 / n) * diff


@dataclass
class CrossEntropy:
    """Mean softmax cross-entropy over all head logits."""

    def __call__(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        n = logits.shape[0]
        lsm = log_softmax(logits)
        value = -float(lsm[np.arange(n), labels].astype(np.float64).mean())
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1
        return value, d / n


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]
Loss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


class Network:
    """Feature extractor ``layers`` plus a linear head ``W`` (classes x feature_dim)."""

    def __init__(self, layers: list, input_dim: int, head: np.ndarray | None = None,
                 dtype=np.float32):
        self.layers = layers
        self.input_dim = int(input_dim)
        self.dtype = np.dtype(dtype)
        dims = [l.out_dim for l in layers if hasattr(l, "out_dim")]
        self.feature_dim = dims[-1] if dims else self.input_dim
        if head is None:
            head = np.zeros((0, self.feature_dim), dtype=self.dtype)
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = [p for l in self.layers for p in l.params()]
        out.append(self.head)
        return out

    def _check(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}), got {np.shape(batch)}")
        return x

    def _forward(self, x):
        acts = [x]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def forward_features(self, batch) -> np.ndarray:
        return self._forward(self._check(batch))[-1]

    def forward_logits(self, batch) -> np.ndarray:
        if self.num_classes == 0:
            raise UninitializedHeadError("classifier head has no classes yet")
        return self.forward_features(batch) @ self.head.T

    def _backward(self, acts, dfeat, need_params):
        grads: list[list[np.ndarray]] = []
        d = dfeat
        for layer, x in zip(reversed(self.layers), reversed(acts[:-1])):
            d, g = layer.backward(x, d, need_params)
            grads.append(g)
        grads.reverse()
        return d, [g for gs in grads for g in gs]

    def input_gradient(self, batch, objective) -> np.ndarray:
        """Gradient of a scalar objective on features (or logits) w.r.t. the input."""
        x = self._check(batch)
        acts = self._forward(x)
        if getattr(objective, "target", "features") == "logits":
            _, dlogits = objective(acts[-1] @ self.head.T)
            dfeat = dlogits @ self.head
        else:
            _, dfeat = objective(acts[-1])
        dx, _ = self._backward(acts, dfeat.astype(self.dtype), need_params=False)
        return dx

    def param_gradient(self, batch, labels, loss) -> tuple[float, list[np.ndarray]]:
        """Loss value and one gradient per entry of :meth:`parameters`."""
        x = self._check(batch)
        labels = np.asarray(labels, dtype=np.int64)
        if self.num_classes == 0:
            raise UninitializedHeadError("classifier head has no classes yet")
        if labels.shape != (x.shape[0],):
            raise LabelError(f"got {labels.shape[0]} labels for {x.shape[0]} samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        acts = self._forward(x)
        feats = acts[-1]
        value, dlogits = loss(feats @ self.head.T, labels)
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        dhead = dlogits.T @ feats
        _, grads = self._backward(acts, dlogits @ self.head, need_params=True)
        grads.append(dhead)
        return value, [g.astype(self.dtype, copy=False) for g in grads]

    def extend_head(self, n_new: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.feature_dim)
        rows = rng.uniform(-bound, bound, size=(n_new, self.feature_dim)).astype(self.dtype)
        self.head = np.concatenate([self.head, rows], axis=0)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        for layer in net.layers:
            for name in ("weight", "bias", "kernel"):
                if hasattr(layer, name):
                    setattr(layer, name, getattr(layer, name).astype(dtype))
        net.head = net.head.astype(dtype)
        return net

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


class SGD:
    """SGD with momentum and L2 weight decay (PyTorch update convention).

    One instance per task: velocity buffers start empty, so creating a new
    optimizer at a task boundary resets them.
    """

    def __init__(self, net: Network, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ValueError(f"bad SGD hyperparameters lr={lr} momentum={momentum} wd={weight_decay}")
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: list[np.ndarray] | None = None

    def step(self, grads: list[np.ndarray]) -> Network:
        params = self.net.parameters()
        if len(grads) != len(params):
            raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= self.lr * v
        return self.net


def sgd_step(net: Network, grads, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional single step; returns the velocity to feed into the next call."""
    opt = SGD(net, lr, momentum, weight_decay)
    opt.velocity = velocity
    opt.step(grads)
    return opt.velocity


# construction helpers

def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def mlp(input_dim: int, hidden: Sequence[int] = (64,), feature_dim: int = 32,
        seed: int = 0, dtype=np.float32, final_relu: bool = True) -> Network:
    """Dense/ReLU stack; the default is two hidden layers with d = 32 features."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, feature_dim]
    layers: list = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense(_he(rng, (b, a), a, dtype), np.zeros(b, dtype=dtype)))
        if i < len(dims) - 2 or final_relu:
            layers.append(ReLU())
    return Network(layers, input_dim, dtype=dtype)


def convnet(in_shape: Sequence[int], channels: int = 8, kernel: int = 3, stride: int = 2,
            feature_dim: int = 64, seed: int = 0, dtype=np.float32) -> Network:
    """One conv block followed by one dense block."""
    rng = np.random.default_rng(seed)
    c = in_shape[0]
    fan = c * kernel * kernel
    conv = Conv2D(_he(rng, (channels, c, kernel, kernel), fan, dtype),
                  np.zeros(channels, dtype=dtype), in_shape, stride=stride, padding=kernel // 2)
    dense = Dense(_he(rng, (feature_dim, conv.out_dim), conv.out_dim, dtype),
                  np.zeros(feature_dim, dtype=dtype))
    return Network([conv, ReLU(), dense, ReLU()], conv.in_dim, dtype=dtype)


# checkpoints

def save_network(net: Network, path: str | Path) -> None:
    arrays = {}
    specs = []
    for i, layer in enumerate(net.layers):
        specs.append(layer.spec())
        for j, p in enumerate(layer.params()):
            arrays[f"l{i}_{j}"] = p
    meta = {"input_dim": net.input_dim, "dtype": net.dtype.str, "layers": specs}
    arrays["head"] = net.head
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path: str | Path) -> Network:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        layers: list = []
        for i, spec in enumerate(meta["layers"]):
            kind = spec["kind"]
            if kind == "dense":
                layers.append(Dense(z[f"l{i}_0"], z[f"l{i}_1"]))
            elif kind == "conv":
                layers.append(Conv2D(z[f"l{i}_0"], z[f"l{i}_1"], spec["in_shape"],
                                     spec["stride"], spec["padding"]))
            elif kind == "relu":
                layers.append(ReLU())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return Network(layers, meta["input_dim"], head=z["head"], dtype=np.dtype(meta["dtype"]))
