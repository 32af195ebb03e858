"""Forward/backward kernels.

Tensors are plain ``numpy.ndarray``; float64 is used throughout. Every
``*_forward`` returns its output plus a cache, and the matching
``*_backward`` consumes that cache exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .. import _kernels

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """A forward cache was reused for a second backward pass."""


class NonFiniteError(FloatingPointError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


class _Cache(dict):
    consumed = False

    def take(self) -> "_Cache":
        if self.consumed:
            raise StaleCacheError("cache already consumed by a backward pass")
        self.consumed = True
        return self


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# LSTM cell with peephole connections
# --------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Weights of one LSTM cell.

    Input matrices have shape ``(hidden, input)``, recurrent ones
    ``(hidden, hidden)``; peephole weights (``W_ic``, ``W_cf``, ``W_oc``)
    are per-unit vectors applied element-wise to the cell state. The
    readout pair ``W_yh``/``b_y`` is optional.
    """

    W_ix: np.ndarray
    W_ih: np.ndarray
    W_ic: np.ndarray
    b_i: np.ndarray
    W_fx: np.ndarray
    W_hf: np.ndarray
    W_cf: np.ndarray
    b_f: np.ndarray
    W_ox: np.ndarray
    W_oh: np.ndarray
    W_oc: np.ndarray
    b_o: np.ndarray
    W_cx: np.ndarray
    W_ch: np.ndarray
    b_c: np.ndarray
    W_yh: np.ndarray | None = None
    b_y: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.W_ix.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_ix.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             readout_dim: int | None = None) -> "LstmParams":
        def glorot(fan_out, fan_in):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(DTYPE)

        H, D = hidden_dim, input_dim
        z = lambda: np.zeros(H, dtype=DTYPE)  # noqa: E731
        p = cls(
            W_ix=glorot(H, D), W_ih=glorot(H, H), W_ic=z(), b_i=z(),
            W_fx=glorot(H, D), W_hf=glorot(H, H), W_cf=z(), b_f=np.ones(H, dtype=DTYPE),
            W_ox=glorot(H, D), W_oh=glorot(H, H), W_oc=z(), b_o=z(),
            W_cx=glorot(H, D), W_ch=glorot(H, H), b_c=z(),
        )
        if readout_dim is not None:
            p.W_yh = glorot(readout_dim, H)
            p.b_y = np.zeros(readout_dim, dtype=DTYPE)
        return p


def lstm_cell(x, h_prev, c_prev, p: LstmParams):
    """One step: logistic gates, tanh candidate and tanh output squashing.

    The output gate peeks at the *new* cell state.
    """
    _check(x.ndim == 2 and x.shape[1] == p.input_dim, f"x shape {x.shape} vs input_dim {p.input_dim}")
    _check(h_prev.shape == (x.shape[0], p.hidden_dim), f"h_prev shape {h_prev.shape}")
    _check(c_prev.shape == h_prev.shape, f"c_prev shape {c_prev.shape}")

    i = sigmoid(x @ p.W_ix.T + h_prev @ p.W_ih.T + c_prev * p.W_ic + p.b_i)
    f = sigmoid(x @ p.W_fx.T + h_prev @ p.W_hf.T + c_prev * p.W_cf + p.b_f)
    g = np.tanh(x @ p.W_cx.T + h_prev @ p.W_ch.T + p.b_c)
    c = f * c_prev + i * g
    o = sigmoid(x @ p.W_ox.T + h_prev @ p.W_oh.T + c * p.W_oc + p.b_o)
    tc = np.tanh(c)
    h = o * tc
    cache = _Cache(x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, g=g, c=c, o=o, tc=tc, p=p)
    return h, c, cache


def lstm_cell_backward(grad_h, grad_c, cache):
    """Gradients of the cell w.r.t. inputs, previous state and weights.

    ``grad_c`` is the gradient arriving at ``c`` from later time steps.
    """
    k = cache.take()
    p: LstmParams = k["p"]
    x, h_prev, c_prev = k["x"], k["h_prev"], k["c_prev"]
    i, f, g, c, o, tc = k["i"], k["f"], k["g"], k["c"], k["o"], k["tc"]
    _check(grad_h.shape == c.shape and grad_c.shape == c.shape, "upstream gradient shape")

    da_o = grad_h * tc * o * (1.0 - o)
    dc = grad_c + grad_h * o * (1.0 - tc * tc) + da_o * p.W_oc
    da_i = dc * g * i * (1.0 - i)
    da_f = dc * c_prev * f * (1.0 - f)
    da_g = dc * i * (1.0 - g * g)

    dx = da_i @ p.W_ix + da_f @ p.W_fx + da_o @ p.W_ox + da_g @ p.W_cx
    dh_prev = da_i @ p.W_ih + da_f @ p.W_hf + da_o @ p.W_oh + da_g @ p.W_ch
    dc_prev = dc * f + da_i * p.W_ic + da_f * p.W_cf

    grads = {
        "W_ix": da_i.T @ x, "W_ih": da_i.T @ h_prev, "W_ic": (da_i * c_prev).sum(0), "b_i": da_i.sum(0),
        "W_fx": da_f.T @ x, "W_hf": da_f.T @ h_prev, "W_cf": (da_f * c_prev).sum(0), "b_f": da_f.sum(0),
        "W_ox": da_o.T @ x, "W_oh": da_o.T @ h_prev, "W_oc": (da_o * c).sum(0), "b_o": da_o.sum(0),
        "W_cx": da_g.T @ x, "W_ch": da_g.T @ h_prev, "b_c": da_g.sum(0),
    }
    return dx, dh_prev, dc_prev, grads


def lstm_readout(h, p: LstmParams):
    if p.W_yh is None:
        raise ShapeError("these LSTM parameters carry no readout")
    return h @ p.W_yh.T + p.b_y, _Cache(h=h, p=p)


def lstm_readout_backward(grad_y, cache):
    k = cache.take()
    p = k["p"]
    return grad_y @ p.W_yh, {"W_yh": grad_y.T @ k["h"], "b_y": grad_y.sum(0)}


# --------------------------------------------------------------------------
# dense / activations / embedding
# --------------------------------------------------------------------------

def dense_forward(x, W, b):
    _check(x.shape[-1] == W.shape[0], f"dense: x {x.shape} vs W {W.shape}")
    return x @ W + b, _Cache(x=x, W=W)


def dense_backward(gout, cache):
    k = cache.take()
    return gout @ k["W"].T, {"W": k["x"].T @ gout, "b": gout.sum(0)}


def relu_forward(x):
    mask = x > 0
    return x * mask, _Cache(mask=mask)


def relu_backward(gout, cache):
    return gout * cache.take()["mask"]


def tanh_forward(x):
    y = np.tanh(x)
    return y, _Cache(y=y)


def tanh_backward(gout, cache):
    y = cache.take()["y"]
    return gout * (1.0 - y * y)


def embedding_lookup(idx, table):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")
    return table[idx], _Cache(idx=idx, n=table.shape[0])


def embedding_backward(gout, cache):
    k = cache.take()
    g = np.zeros((k["n"], gout.shape[-1]), dtype=gout.dtype)
    np.add.at(g, k["idx"], gout)
    return {"table": g}


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------

def conv2d_forward(x, w, b, padding: int | tuple[int, int] = 0):
    """Valid cross-correlation with optional symmetric zero padding.

    ``x``: (B, C, H, W); ``w``: (K, C, kh, kw); output (B, K, H', W').
    """
    _check(x.ndim == 4 and w.ndim == 4 and x.shape[1] == w.shape[1],
           f"conv2d: x {x.shape} vs w {w.shape}")
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    _check(xp.shape[2] >= w.shape[2] and xp.shape[3] >= w.shape[3], "conv2d: kernel larger than input")
    out = _kernels.conv2d_forward(xp, w, b)
    return out, _Cache(xp=xp, w=w, pad=(ph, pw))


def conv2d_backward(gout, cache):
    k = cache.take()
    dxp, dw, db = _kernels.conv2d_backward(k["xp"], k["w"], gout)
    ph, pw = k["pad"]
    H, W = dxp.shape[2], dxp.shape[3]
    dx = dxp[:, :, ph:H - ph, pw:W - pw]
    return dx, {"w": dw, "b": db}


def maxpool_forward(x, pool: tuple[int, int], mode: str = "strict"):
    """Non-overlapping max pooling.

    ``mode="strict"`` requires the window to divide both extents;
    ``mode="floor"`` drops the trailing remainder (it receives zero gradient).
    """
    ph, pw = pool
    _check(x.ndim == 4, "maxpool expects (B, C, H, W)")
    H, W = x.shape[2], x.shape[3]
    if mode == "strict" and (H % ph or W % pw):
        raise ShapeError(f"pool {pool} does not divide extent {(H, W)}")
    _check(H >= ph and W >= pw, f"pool {pool} larger than extent {(H, W)}")
    out, arg = _kernels.maxpool_forward(x, ph, pw)
    return out, _Cache(arg=arg, shape=x.shape, pool=(ph, pw))


def maxpool_backward(gout, cache):
    k = cache.take()
    ph, pw = k["pool"]
    return _kernels.maxpool_backward(gout, k["arg"], k["shape"], ph, pw)


# --------------------------------------------------------------------------
# batch normalisation and dropout
# --------------------------------------------------------------------------

BN_EPS = 1e-5


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.9, eps: float = BN_EPS):
    """Per-feature (2-D) or per-channel (4-D) normalisation.

    In train mode the batch statistics are used and the running buffers are
    updated in place; in inference mode the running buffers are used.
    """
    axes, bshape = _bn_axes(x)
    _check(gamma.shape[0] == x.shape[1], "batchnorm channel count")
    if train:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out, _Cache(xhat=xhat, inv=inv, gamma=gamma, train=train, axes=axes, bshape=bshape)


def batchnorm_backward(gout, cache):
    k = cache.take()
    axes, bshape = k["axes"], k["bshape"]
    xhat, inv, gamma = k["xhat"], k["inv"], k["gamma"]
    dgamma = (gout * xhat).sum(axis=axes)
    dbeta = gout.sum(axis=axes)
    dxhat = gout * gamma.reshape(bshape)
    if not k["train"]:
        return dxhat * inv.reshape(bshape), {"gamma": dgamma, "beta": dbeta}
    n = gout.size // gout.shape[1]
    dx = (inv.reshape(bshape) / n) * (
        n * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, {"gamma": dgamma, "beta": dbeta}


def dropout_forward(x, keep_prob: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity at inference or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    if not train or keep_prob == 1.0:
        return x, _Cache(mask=None)
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit RNG stream")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * mask, _Cache(mask=mask)


def dropout_backward(gout, cache):
    mask = cache.take()["mask"]
    return gout if mask is None else gout * mask


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_xent(logits, label, class_weights):
    """Class-weighted softmax cross-entropy.

    For a single sample (1-D logits, integer label) returns
    ``w[label] * -log softmax[label]`` and its gradient. For a batch
    (2-D logits, label array) the loss and gradient are averaged over the
    batch.
    """
    class_weights = np.asarray(class_weights, dtype=DTYPE)
    if np.any(class_weights <= 0):
        raise ValueError("class weights must be positive")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    single = logits.ndim == 1
    L = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(label))
    _check(L.shape[-1] == class_weights.shape[0], "logit width vs class weights")
    _check(y.shape[0] == L.shape[0], "label count vs batch")

    z = L - L.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(L.shape[0])
    nll = logsum - z[rows, y]
    w = class_weights[y]
    grad = softmax(L)
    grad[rows, y] -= 1.0
    grad *= w[:, None]
    if single:
        return float(w[0] * nll[0]), grad[0]
    B = L.shape[0]
    return float((w * nll).sum() / B), grad / B
