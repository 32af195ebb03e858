"""Stateful layer wrappers over :mod:`impactcast.nn.functional`.

Each layer keeps its parameters in ``params`` and, after ``backward``,
the matching gradients in ``grads``. Arrays are updated in place by the
optimizer, so ``params`` must not be rebound.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .functional import DTYPE, LstmParams


def glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(DTYPE)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params = {"W": glorot(rng, n_in, n_out, (n_in, n_out)), "b": np.zeros(n_out, dtype=DTYPE)}

    def forward(self, x, train=False):
        y, self._cache = F.dense_forward(x, self.params["W"], self.params["b"])
        return y

    def backward(self, g):
        dx, self.grads = F.dense_backward(g, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        y, self._cache = F.relu_forward(x)
        return y

    def backward(self, g):
        return F.relu_backward(g, self._cache)


class Tanh(Layer):
    def forward(self, x, train=False):
        y, self._cache = F.tanh_forward(x)
        return y

    def backward(self, g):
        return F.tanh_backward(g, self._cache)


class Embedding(Layer):
    def __init__(self, n, dim, rng):
        super().__init__()
        self.params = {"table": rng.uniform(-0.05, 0.05, size=(n, dim)).astype(DTYPE)}

    def forward(self, idx, train=False):
        y, self._cache = F.embedding_lookup(idx, self.params["table"])
        return y

    def backward(self, g):
        self.grads = F.embedding_backward(g, self._cache)
        return None


class BatchNorm(Layer):
    def __init__(self, n, momentum=0.9):
        super().__init__()
        self.momentum = momentum
        self.params = {"gamma": np.ones(n, dtype=DTYPE), "beta": np.zeros(n, dtype=DTYPE)}
        self.buffers = {"running_mean": np.zeros(n, dtype=DTYPE), "running_var": np.ones(n, dtype=DTYPE)}

    def forward(self, x, train=False):
        y, self._cache = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train, self.momentum,
        )
        return y

    def backward(self, g):
        dx, self.grads = F.batchnorm_backward(g, self._cache)
        return dx


class Dropout(Layer):
    def __init__(self, keep_prob, rng):
        super().__init__()
        self.keep_prob = keep_prob
        self.rng = rng

    def forward(self, x, train=False):
        y, self._cache = F.dropout_forward(x, self.keep_prob, self.rng, train)
        return y

    def backward(self, g):
        return F.dropout_backward(g, self._cache)


class Conv2D(Layer):
    def __init__(self, c_in, c_out, kernel, rng, padding=0):
        super().__init__()
        kh, kw = kernel
        self.padding = padding
        self.params = {
            "w": glorot(rng, c_in * kh * kw, c_out * kh * kw, (c_out, c_in, kh, kw)),
            "b": np.zeros(c_out, dtype=DTYPE),
        }

    def forward(self, x, train=False):
        y, self._cache = F.conv2d_forward(x, self.params["w"], self.params["b"], self.padding)
        return y

    def backward(self, g):
        dx, self.grads = F.conv2d_backward(g, self._cache)
        return dx


class MaxPool2D(Layer):
    def __init__(self, pool, mode="floor"):
        super().__init__()
        self.pool = pool
        self.mode = mode

    def forward(self, x, train=False):
        y, self._cache = F.maxpool_forward(x, self.pool, self.mode)
        return y

    def backward(self, g):
        return F.maxpool_backward(g, self._cache)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class LSTM(Layer):
    """Unrolled LSTM over a (B, T, D) sequence with backprop through time."""

    def __init__(self, n_in, hidden, rng, return_sequences=False):
        super().__init__()
        self.hidden = hidden
        self.return_sequences = return_sequences
        self.cell = LstmParams.init(n_in, hidden, rng)
        self.params = self.cell.as_dict()

    def forward(self, x, train=False):
        B, T, _ = x.shape
        h = np.zeros((B, self.hidden), dtype=DTYPE)
        c = np.zeros_like(h)
        self._caches = []
        hs = np.empty((B, T, self.hidden), dtype=DTYPE)
        for t in range(T):
            h, c, cache = F.lstm_cell(x[:, t, :], h, c, self.cell)
            self._caches.append(cache)
            hs[:, t, :] = h
        self._T = T
        return hs if self.return_sequences else h

    def backward(self, g):
        B = g.shape[0]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dx = np.empty((B, self._T, self.cell.input_dim), dtype=DTYPE)
        dh_next = np.zeros((B, self.hidden), dtype=DTYPE)
        dc_next = np.zeros_like(dh_next)
        for t in reversed(range(self._T)):
            dh = dh_next + (g[:, t, :] if self.return_sequences else (g if t == self._T - 1 else 0.0))
            dx_t, dh_next, dc_next, gp = F.lstm_cell_backward(dh, dc_next, self._caches[t])
            dx[:, t, :] = dx_t
            for k, v in gp.items():
                grads[k] += v
        self.grads = grads
        return dx


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def collect(named_layers):
    """Flatten ``{prefix: layer}`` into parameter, gradient and buffer dicts."""
    params, grads, buffers = {}, {}, {}

    def walk(prefix, layer):
        if isinstance(layer, Sequential):
            for i, sub in enumerate(layer.layers):
                walk(f"{prefix}.{i}", sub)
            return
        for k, v in layer.params.items():
            params[f"{prefix}.{k}"] = v
            if k in layer.grads:
                grads[f"{prefix}.{k}"] = layer.grads[k]
        for k, v in layer.buffers.items():
            buffers[f"{prefix}.{k}"] = v

    for prefix, layer in named_layers.items():
        walk(prefix, layer)
    return params, grads, buffers
