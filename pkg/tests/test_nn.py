import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from impactcast import _accel
from impactcast.nn import functional as F
from impactcast.nn import load_weights, save_weights
from impactcast.nn.optim import AdamState, adam_step
from layer_checks import CHECKS

GRAD_TOL = 1e-4
SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(CHECKS))
def test_backward_matches_finite_differences(name, seed):
    assert CHECKS[name](seed) < GRAD_TOL


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", ["conv2d", "maxpool"])
def test_accelerated_kernels_gradcheck(name, seed, backend):
    assert CHECKS[name](seed) < GRAD_TOL


# ---------------------------------------------------------------- LSTM cell

def _straight_line_lstm(x, h, c, p):
    """Per-sample, per-unit transcription of the six cell equations."""
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    B, H = h.shape
    h_out, c_out = np.zeros_like(h), np.zeros_like(c)
    for b in range(B):
        for j in range(H):
            ai = sum(p.W_ix[j, k] * x[b, k] for k in range(x.shape[1])) + \
                sum(p.W_ih[j, k] * h[b, k] for k in range(H)) + p.W_ic[j] * c[b, j] + p.b_i[j]
            af = sum(p.W_fx[j, k] * x[b, k] for k in range(x.shape[1])) + \
                sum(p.W_hf[j, k] * h[b, k] for k in range(H)) + p.W_cf[j] * c[b, j] + p.b_f[j]
            ag = sum(p.W_cx[j, k] * x[b, k] for k in range(x.shape[1])) + \
                sum(p.W_ch[j, k] * h[b, k] for k in range(H)) + p.b_c[j]
            cj = sig(af) * c[b, j] + sig(ai) * math.tanh(ag)
            ao = sum(p.W_ox[j, k] * x[b, k] for k in range(x.shape[1])) + \
                sum(p.W_oh[j, k] * h[b, k] for k in range(H)) + p.W_oc[j] * cj + p.b_o[j]
            c_out[b, j] = cj
            h_out[b, j] = sig(ao) * math.tanh(cj)
    return h_out, c_out


def test_lstm_zero_parameters_fixed_point(rng):
    p = F.LstmParams.init(3, 4, rng)
    for arr in p.as_dict().values():
        arr[...] = 0.0
    h, c, _ = F.lstm_cell(rng.normal(size=(2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), p)
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_matches_straight_line_oracle(rng):
    p = F.LstmParams.init(3, 4, rng)
    for arr in p.as_dict().values():
        arr[...] = rng.normal(size=arr.shape)
    x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    h, c, _ = F.lstm_cell(x, h0, c0, p)
    ho, co = _straight_line_lstm(x, h0, c0, p)
    np.testing.assert_allclose(h, ho, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c, co, rtol=0, atol=1e-12)


def test_lstm_is_pure(rng):
    p = F.LstmParams.init(3, 4, rng)
    x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    a = F.lstm_cell(x, h0, c0, p)
    b = F.lstm_cell(x, h0, c0, p)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_lstm_backward_zero_upstream(rng):
    p = F.LstmParams.init(3, 4, rng)
    _, _, cache = F.lstm_cell(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), p)
    dx, dh, dc, grads = F.lstm_cell_backward(np.zeros((2, 4)), np.zeros((2, 4)), cache)
    assert not dx.any() and not dh.any() and not dc.any()
    assert all(not g.any() for g in grads.values())


def test_lstm_unused_unit_gets_zero_gradient(rng):
    p = F.LstmParams.init(3, 4, rng)
    for arr in p.as_dict().values():
        arr[...] = rng.normal(size=arr.shape)
    _, _, cache = F.lstm_cell(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), p)
    gh, gc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    gh[:, 2] = 0.0
    gc[:, 2] = 0.0
    _, _, _, grads = F.lstm_cell_backward(gh, gc, cache)
    for name, g in grads.items():
        assert not np.any(g[2]), name


def test_lstm_errors(rng):
    p = F.LstmParams.init(3, 4, rng)
    with pytest.raises(F.ShapeError):
        F.lstm_cell(np.zeros((2, 5)), np.zeros((2, 4)), np.zeros((2, 4)), p)
    _, _, cache = F.lstm_cell(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), p)
    F.lstm_cell_backward(np.ones((2, 4)), np.ones((2, 4)), cache)
    with pytest.raises(F.StaleCacheError):
        F.lstm_cell_backward(np.ones((2, 4)), np.ones((2, 4)), cache)


# ---------------------------------------------------------------- conv / pool

def test_conv_identity_kernel(rng, backend):
    x = rng.normal(size=(2, 3, 4, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3), 0, 0] = 1.0
    out, _ = F.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_maxpool_constant_input_routes_to_first(backend):
    x = np.full((1, 1, 4, 4), 3.0)
    out, cache = F.maxpool_forward(x, (2, 2))
    assert np.all(out == 3.0)
    dx = F.maxpool_backward(np.ones_like(out), cache)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(dx[0, 0], expected)


def test_maxpool_strict_rejects_remainder():
    with pytest.raises(F.ShapeError):
        F.maxpool_forward(np.zeros((1, 1, 3, 4)), (2, 2), "strict")


def test_backends_agree(rng):
    x, w, b = rng.normal(size=(3, 2, 4, 9)), rng.normal(size=(5, 2, 1, 3)), rng.normal(size=5)
    results = {}
    before = _accel.backend_name()
    for name in ("numpy", "numba"):
        _accel.set_backend(name)
        out, c = F.conv2d_forward(x, w, b)
        dx, g = F.conv2d_backward(np.ones_like(out), c)
        pooled, pc = F.maxpool_forward(out, (1, 2), "floor")
        results[name] = (out, dx, g["w"], g["b"], pooled, F.maxpool_backward(pooled, pc))
    _accel.set_backend(before)
    for a, bb in zip(results["numpy"], results["numba"]):
        np.testing.assert_allclose(a, bb, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- loss

def test_xent_uniform_two_class():
    loss, _ = F.weighted_xent(np.zeros(2), 1, [1.0, 1.0])
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_xent_unit_weights_equal_plain_cross_entropy(rng):
    logits = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    loss, _ = F.weighted_xent(logits, y, np.ones(3))
    plain = np.mean([-math.log(math.exp(l[k]) / sum(math.exp(v) for v in l)) for l, k in zip(logits, y)])
    assert loss == pytest.approx(plain, abs=1e-12)


def test_xent_linear_in_weight(rng):
    logits = rng.normal(size=3)
    l1, g1 = F.weighted_xent(logits, 2, [1.0, 1.0, 1.5])
    l2, g2 = F.weighted_xent(logits, 2, [1.0, 1.0, 3.0])
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14)


def test_xent_rejects_non_finite():
    with pytest.raises(F.NonFiniteError):
        F.weighted_xent(np.array([np.nan, 0.0]), 0, [1, 1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    s = F.softmax(z)
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- dropout / batchnorm

def test_dropout_identities(rng):
    x = rng.normal(size=(3, 4))
    assert F.dropout_forward(x, 1.0, rng, True)[0] is x
    assert F.dropout_forward(x, 0.3, None, False)[0] is x


def test_dropout_same_stream_same_mask():
    x = np.ones((5, 5))
    a = F.dropout_forward(x, 0.5, np.random.default_rng(7), True)[0]
    b = F.dropout_forward(x, 0.5, np.random.default_rng(7), True)[0]
    assert np.array_equal(a, b)


def test_batchnorm_inference_matches_train_when_stats_agree(rng):
    x = rng.normal(size=(8, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    train_out, _ = F.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
    mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    infer_out, _ = F.batchnorm_forward(x, gamma, beta, mu, var, False)
    np.testing.assert_allclose(infer_out, train_out, atol=1e-12)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"], [1.0, -2.0]) and state.t == 1


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    adam_step(p, {"w": np.array([3.0, -0.01, 250.0])}, AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_minimises_quadratic():
    p = {"theta": np.array([1.0])}
    state = AdamState(lr=0.1)
    for _ in range(200):
        adam_step(p, {"theta": 2 * p["theta"]}, state)
    assert abs(p["theta"][0]) < 0.05


def test_weight_roundtrip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    save_weights(tmp_path, arrays, {"kind": "test"})
    back, manifest = load_weights(tmp_path)
    assert manifest["kind"] == "test" and manifest["dtype"] == "<f8"
    for k in arrays:
        assert np.array_equal(arrays[k], back[k])
