"""Seeded finite-difference checks, one function per differentiable kernel.

Each check builds a random instance from ``seed``, forms the scalar
``sum(output * R)`` for a fixed random ``R``, and returns the worst
relative error between the analytic backward pass and central differences
over every input and parameter.
"""
import numpy as np

from gradcheck import max_rel_error, numeric_grad
from impactcast.nn import functional as F
from impactcast.nn.layers import LSTM


def _worst(pairs):
    return max(max_rel_error(a, n) for a, n in pairs)


def check_lstm_cell(seed):
    rng = np.random.default_rng(seed)
    B, D, H = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    p = F.LstmParams.init(D, H, rng)
    for arr in p.as_dict().values():
        arr[...] = rng.normal(scale=0.5, size=arr.shape)
    x, h0, c0 = (rng.normal(size=(B, D)), rng.normal(size=(B, H)), rng.normal(size=(B, H)))
    Rh, Rc = rng.normal(size=(B, H)), rng.normal(size=(B, H))

    def loss():
        h, c, _ = F.lstm_cell(x, h0, c0, p)
        return float((h * Rh).sum() + (c * Rc).sum())

    _, _, cache = F.lstm_cell(x, h0, c0, p)
    dx, dh, dc, grads = F.lstm_cell_backward(Rh, Rc, cache)
    pairs = [(dx, numeric_grad(loss, x)), (dh, numeric_grad(loss, h0)), (dc, numeric_grad(loss, c0))]
    for name, arr in p.as_dict().items():
        pairs.append((grads[name], numeric_grad(loss, arr)))
    return _worst(pairs)


def check_lstm_sequence(seed):
    rng = np.random.default_rng(seed)
    B, T, D, H = 2, int(rng.integers(1, 5)), 3, 4
    layer = LSTM(D, H, rng, return_sequences=bool(seed % 2))
    for arr in layer.params.values():
        arr[...] = rng.normal(scale=0.5, size=arr.shape)
    x = rng.normal(size=(B, T, D))
    R = rng.normal(size=(B, T, H) if layer.return_sequences else (B, H))

    def loss():
        return float((layer.forward(x) * R).sum())

    layer.forward(x)
    dx = layer.backward(R)
    grads = dict(layer.grads)
    pairs = [(dx, numeric_grad(loss, x))]
    pairs += [(grads[k], numeric_grad(loss, v)) for k, v in layer.params.items()]
    return _worst(pairs)


def check_lstm_readout(seed):
    rng = np.random.default_rng(seed)
    p = F.LstmParams.init(3, 4, rng, readout_dim=2)
    h = rng.normal(size=(3, 4))
    R = rng.normal(size=(3, 2))

    def loss():
        return float((F.lstm_readout(h, p)[0] * R).sum())

    _, cache = F.lstm_readout(h, p)
    dh, g = F.lstm_readout_backward(R, cache)
    return _worst([(dh, numeric_grad(loss, h)), (g["W_yh"], numeric_grad(loss, p.W_yh)),
                   (g["b_y"], numeric_grad(loss, p.b_y))])


def check_dense(seed):
    rng = np.random.default_rng(seed)
    n, i, o = rng.integers(1, 6, size=3)
    x, W, b = rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)
    R = rng.normal(size=(n, o))

    def loss():
        return float((F.dense_forward(x, W, b)[0] * R).sum())

    _, cache = F.dense_forward(x, W, b)
    dx, g = F.dense_backward(R, cache)
    return _worst([(dx, numeric_grad(loss, x)), (g["W"], numeric_grad(loss, W)), (g["b"], numeric_grad(loss, b))])


def check_embedding(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=7)  # repeats exercise accumulation
    R = rng.normal(size=(7, 3))

    def loss():
        return float((F.embedding_lookup(idx, table)[0] * R).sum())

    _, cache = F.embedding_lookup(idx, table)
    g = F.embedding_backward(R, cache)
    return max_rel_error(g["table"], numeric_grad(loss, table))


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    B, C, K = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    kh, kw = rng.integers(1, 4, size=2)
    H, W = kh + rng.integers(0, 4), kw + rng.integers(0, 4)
    pad = int(seed % 2)
    x, w, b = rng.normal(size=(B, C, H, W)), rng.normal(size=(K, C, kh, kw)), rng.normal(size=K)
    out, _ = F.conv2d_forward(x, w, b, pad)
    R = rng.normal(size=out.shape)

    def loss():
        return float((F.conv2d_forward(x, w, b, pad)[0] * R).sum())

    _, cache = F.conv2d_forward(x, w, b, pad)
    dx, g = F.conv2d_backward(R, cache)
    return _worst([(dx, numeric_grad(loss, x)), (g["w"], numeric_grad(loss, w)), (g["b"], numeric_grad(loss, b))])


def check_maxpool(seed):
    rng = np.random.default_rng(seed)
    ph, pw = rng.integers(1, 3, size=2)
    H, W = ph * rng.integers(1, 4) + (seed % 2), pw * rng.integers(1, 4)
    x = rng.normal(size=(2, 2, H, W))
    out, _ = F.maxpool_forward(x, (ph, pw), "floor")
    R = rng.normal(size=out.shape)

    def loss():
        return float((F.maxpool_forward(x, (ph, pw), "floor")[0] * R).sum())

    _, cache = F.maxpool_forward(x, (ph, pw), "floor")
    return max_rel_error(F.maxpool_backward(R, cache), numeric_grad(loss, x))


def check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    shape = (4, 3) if seed % 2 else (3, 2, 2, 3)
    C = shape[1]
    x = rng.normal(size=shape) * 2 + 1
    gamma, beta = rng.normal(size=C), rng.normal(size=C)
    rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, size=C)
    train = seed % 3 != 0
    R = rng.normal(size=shape)

    def loss():
        out, _ = F.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)
        return float((out * R).sum())

    _, cache = F.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)
    dx, g = F.batchnorm_backward(R, cache)
    return _worst([(dx, numeric_grad(loss, x)), (g["gamma"], numeric_grad(loss, gamma)),
                   (g["beta"], numeric_grad(loss, beta))])


def check_dropout(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    keep = float(rng.uniform(0.3, 1.0))
    R = rng.normal(size=x.shape)

    def loss():
        return float((F.dropout_forward(x, keep, np.random.default_rng(seed), True)[0] * R).sum())

    _, cache = F.dropout_forward(x, keep, np.random.default_rng(seed), True)
    return max_rel_error(F.dropout_backward(R, cache), numeric_grad(loss, x))


def check_weighted_xent(seed):
    rng = np.random.default_rng(seed)
    B, C = int(rng.integers(1, 5)), int(rng.integers(2, 4))
    logits = rng.normal(size=(B, C)) * 2
    labels = rng.integers(0, C, size=B)
    w = rng.uniform(0.5, 5, size=C)

    def loss():
        return F.weighted_xent(logits, labels, w)[0]

    _, g = F.weighted_xent(logits, labels, w)
    return max_rel_error(g, numeric_grad(loss, logits))


def check_activations(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    R = rng.normal(size=x.shape)
    out = []
    for fwd, bwd in ((F.relu_forward, F.relu_backward), (F.tanh_forward, F.tanh_backward)):
        def loss():
            return float((fwd(x)[0] * R).sum())

        _, cache = fwd(x)
        out.append((bwd(R, cache), numeric_grad(loss, x)))
    return _worst(out)


CHECKS = {
    "lstm_cell": check_lstm_cell,
    "lstm_sequence": check_lstm_sequence,
    "lstm_readout": check_lstm_readout,
    "dense": check_dense,
    "embedding": check_embedding,
    "conv2d": check_conv2d,
    "maxpool": check_maxpool,
    "batchnorm": check_batchnorm,
    "dropout": check_dropout,
    "weighted_xent": check_weighted_xent,
    "activations": check_activations,
}
