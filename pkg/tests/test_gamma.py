from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impactcast import gamma
from impactcast.gamma import DegenerateDesign, GammaModel, UnseenSeverity, classify_gamma, fit_gamma
from impactcast.ingest import AccidentRecord

SEV_OFFSET = {1: 0.0, 2: 4.0, 3: 9.0, 4: 15.0}


def linear_delay_data(n, seed):
    r = np.random.default_rng(seed)
    sev = r.integers(1, 5, n)
    dur = r.uniform(0, 120, n)
    dist = r.uniform(0, 5, n)
    dur[0] = dist[0] = 0.0
    delay = 0.3 * dur + 0.5 * dist + np.array([SEV_OFFSET[s] for s in sev])
    return sev, dur, dist, delay


@pytest.fixture(scope="module")
def data5000():
    return linear_delay_data(5000, 7)


@pytest.fixture(scope="module")
def mlp5000(data5000):
    return fit_gamma(*data5000, kind="mlp", seed=0)


def test_linear_fit_noise_free(data5000):
    _, metrics = fit_gamma(*data5000, kind="linear")
    assert metrics["mse"] < 1e-6


def test_mlp_fit_noise_free(mlp5000):
    model, metrics = mlp5000
    assert metrics["mse"] < 1e-2
    assert len(model.loss_curve) == gamma.MLP_EPOCHS
    assert [p.shape for p in model.params.values()] == [(6, 3), (3,), (3, 3), (3,), (3, 3), (3,), (3, 3), (3,),
                                                        (3, 1), (1,)]


@pytest.mark.parametrize("seed", range(4))
def test_full_batch_loss_non_increasing_after_warmup(seed):
    sev, dur, dist, delay = linear_delay_data(2000, 11)
    model, _ = fit_gamma(sev, dur, dist, delay, kind="mlp", seed=seed, batch_size=2000)
    curve = np.array(model.loss_curve)
    assert np.all(np.diff(curve[20:]) <= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(120, 400))
def test_linear_matches_normal_equations(seed, n):
    r = np.random.default_rng(seed)
    sev = r.integers(1, 5, n)
    sev[:4] = [1, 2, 3, 4]
    dur, dist = r.exponential(30, n), r.exponential(1, n)
    delay = r.normal(10, 5, n) + 0.2 * dur
    model, _ = fit_gamma(sev, dur, dist, delay, kind="linear", seed=seed)
    tr, _ = gamma.split_indices(n, gamma.TRAIN_FRACTION, seed)
    X = model.design(sev, dur, dist)[tr]
    y = model.scale_target(delay)[tr]
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(model.params["coef"], oracle, rtol=0, atol=1e-8)


def test_linear_degenerate_design():
    n = 200
    sev = np.full(n, 2)
    dur = np.linspace(1, 50, n)
    with pytest.raises(DegenerateDesign):
        fit_gamma(sev, dur, dur.copy(), dur, kind="linear")


def test_too_few_records():
    with pytest.raises(ValueError):
        fit_gamma(*linear_delay_data(50, 0), kind="linear")


def test_zero_triple_reads_severity_coefficient(data5000):
    model, _ = fit_gamma(*data5000, kind="linear")
    assert model.norm["duration_min"] == 0 and model.norm["distance_min"] == 0
    for j, s in enumerate(model.severities):
        assert gamma.apply_gamma(model, s, 0.0, 0.0)[0] == pytest.approx(model.params["coef"][j], abs=1e-15)


def test_apply_batch_equals_single(mlp5000, data5000):
    model, _ = mlp5000
    sev, dur, dist, _ = (a[:40] for a in data5000)
    batch = gamma.apply_gamma(model, sev, dur, dist)
    single = np.array([gamma.apply_gamma(model, s, d, x)[0] for s, d, x in zip(sev, dur, dist)])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-9)
    assert gamma.apply_gamma(model, [2, 2], [30, 30], [1, 1]).tolist()[0] == \
        gamma.apply_gamma(model, [2, 2], [30, 30], [1, 1]).tolist()[1]


def test_unseen_severity_warns():
    model = GammaModel("linear", [1, 2, 3], {k: 0.0 for k in ("duration_min", "distance_min", "delay_min")} |
                       {k: 1.0 for k in ("duration_max", "distance_max", "delay_max")},
                       {"coef": np.array([1.0, 2.0, 3.0, 0.0, 0.0])})
    with pytest.warns(UnseenSeverity):
        out = gamma.apply_gamma(model, [4], [0.0], [0.0])
    assert out[0] == 3.0


def test_model_roundtrip(tmp_path, mlp5000, data5000):
    model, _ = mlp5000
    model.save(tmp_path)
    back = GammaModel.load(tmp_path)
    X = model.design(*(a[:100] for a in data5000[:3]))
    assert np.array_equal(back.predict(X), model.predict(X))


# ---------------------------------------------------------------- classify

def test_classify_median_rule():
    eps = 1e-9
    assert classify_gamma([0.5 - eps, 0.5 + eps, 0.5], 0.5).tolist() == [1, 2, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50), st.floats(-10, 10))
def test_classify_monotone(gs, median):
    g = np.sort(np.array(gs))
    assert np.all(np.diff(classify_gamma(g, median)) >= 0)


def test_label_split_is_even_and_uses_train_median():
    model = GammaModel("linear", [1, 2, 3, 4], {"duration_min": 0.0, "duration_max": 100.0, "distance_min": 0.0,
                                                "distance_max": 10.0, "delay_min": 0.0, "delay_max": 1.0},
                       {"coef": np.array([0.0, 0.1, 0.2, 0.3, 1.0, 0.5])})
    t0 = datetime(2019, 2, 1, tzinfo=timezone.utc)
    r = np.random.default_rng(3)
    accs = [AccidentRecord(f"A{i}", int(r.integers(1, 5)), t0 + timedelta(hours=i),
                           t0 + timedelta(hours=i, minutes=float(r.uniform(1, 90))), 34.0, -118.3,
                           float(r.uniform(0, 3))) for i in range(400)]
    cut = t0 + timedelta(hours=300)
    labels = gamma.label_accidents(model, accs, cut)
    train = labels.gamma_class[labels.in_train]
    assert (train == 1).sum() == 150 and (train == 2).sum() == 150
    assert labels.median == pytest.approx(np.median(labels.gamma[:300]))
