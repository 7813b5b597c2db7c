from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpad import autodiff as ad
from cpad.autodiff import Tensor
from cpad.temporal import (Model, ModelConfig, attention_pool, bce_loss, classify, encode_sequence, forward,
                           forward_features)

TOY = ModelConfig(hidden=8, gat_heads=2, layers=1, attn_heads=2, t_max=8, seed=1)


def test_singleton_sequence():
    m = Model(TOY)
    trace = []
    out = encode_sequence(np.ones((1, 8)), m.params, TOY, trace)
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))
    assert all(np.all(w == 1.0) for w in trace)


def test_sequence_too_long():
    with pytest.raises(ValueError):
        encode_sequence(np.ones((9, 8)), Model(TOY).params, TOY)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 8))
def test_encoder_attention_rows_sum_to_one(seed, T):
    cfg = ModelConfig(hidden=8, gat_heads=2, layers=2, attn_heads=2, t_max=8, seed=seed)
    trace = []
    out = encode_sequence(np.random.default_rng(seed).normal(size=(T, 8)) * 5, Model(cfg).params, cfg, trace)
    assert out.shape == (T, 8)
    assert len(trace) == 2
    for w in trace:
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) < 1e-9)


def test_attention_pool_identical_elements():
    x = np.random.default_rng(0).normal(size=8)
    z = attention_pool(np.tile(x, (5, 1)), np.random.default_rng(1).normal(size=8))
    assert np.allclose(z.data, x, rtol=0, atol=1e-15)


def test_attention_pool_zero_vector_is_mean():
    seq = np.random.default_rng(2).normal(size=(6, 8))
    trace = []
    z = attention_pool(seq, np.zeros(8), trace)
    assert np.allclose(trace[0], 1 / 6) and np.allclose(z.data, seq.mean(axis=0), atol=1e-15)


def test_attention_pool_dominant_element():
    seq = np.random.default_rng(3).normal(size=(5, 8))
    w = np.zeros(8)
    w[0] = 1.0
    seq[:, 0] = 0.0
    seq[2, 0] = 50.0
    z = attention_pool(seq, w).data
    assert np.max(np.abs(z - seq[2])) < 1e-9


def test_attention_pool_empty():
    with pytest.raises(ValueError):
        attention_pool(np.zeros((0, 8)), np.zeros(8))


def test_classify_boundary_and_saturation():
    Wc = Tensor(np.ones((2, 1)))
    p, label = classify(np.zeros(2), Wc, Tensor([0.0]))
    assert float(p.data) == 0.5 and not label
    p, label = classify(np.array([5.0, 5.0]), Wc, Tensor([0.0]))
    assert float(p.data) > 0.9999 and label
    logits = np.linspace(-30, 30, 101)
    ps = [float(classify(np.array([v]), Tensor([[1.0]]), Tensor([0.0]))[0].data) for v in logits]
    assert all(b >= a for a, b in zip(ps, ps[1:]))


def test_bce_examples():
    assert float(bce_loss(np.full(4, 0.5), [0, 1, 0, 1], 1.0).data) == pytest.approx(math.log(2), abs=1e-9)
    assert float(bce_loss(np.array([0.0, 1.0, 1.0]), [0, 1, 1], 3.0).data) < 1e-6
    with pytest.raises(ValueError):
        bce_loss(np.full(3, 0.5), [0, 1])


def test_bce_pos_weight_and_gradient():
    rng = np.random.default_rng(4)
    p0 = rng.uniform(0.05, 0.95, 6)
    y = np.array([1, 0, 1, 0, 0, 1])
    expected = -np.mean(3 * y * np.log(p0) + (1 - y) * np.log(1 - p0))
    p = Tensor(p0, requires_grad=True)
    loss = bce_loss(p, y, 3.0)
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)
    loss.backward()
    fd = np.array([(float(bce_loss(p0 + e, y).data) - float(bce_loss(p0 - e, y).data)) / 2e-5
                   for e in np.eye(6) * 1e-5])
    assert np.linalg.norm(p.grad - fd) / np.linalg.norm(fd) < 1e-4


def _toy_inputs(seed=0, N=2, T=6):
    return np.random.default_rng(seed).uniform(0, 50, size=(1, T, N, 264))


def test_end_to_end_gradient_check():
    """Sensor inputs and each parameter against central differences along random directions.

    One direction per tensor: perturbing every parameter at once moves the
    point far enough to cross ReLU kinks.
    """
    m = Model(TOY)
    sensors = _toy_inputs()
    rng = np.random.default_rng(5)

    def loss_at(arrays, s):
        return float(bce_loss(forward_features(Model(TOY, arrays), s, [0]), [1.0]).data)

    x = Tensor(sensors, requires_grad=True)
    bce_loss(forward_features(m, x, [0]), [1.0]).backward()
    base = {k: v.copy() for k, v in m.arrays().items()}
    e = 1e-5
    checks = [("sensors", x.grad, lambda d, sign: loss_at(base, sensors + sign * e * d), sensors.shape)]
    for k in base:
        checks.append((k, m.params[k].grad,
                       lambda d, sign, k=k: loss_at({**base, k: base[k] + sign * e * d}, sensors), base[k].shape))
    for name, g, f, shape in checks:
        d = rng.normal(size=shape)
        analytic = float((g * d).sum()) if g is not None else 0.0
        numeric = (f(d, 1) - f(d, -1)) / (2 * e)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        assert err < 1e-4, f"{name}: {analytic} vs {numeric}"


def test_forward_full_blackout_and_determinism(small_scenarios):
    sc = small_scenarios[0]
    m = Model(ModelConfig(hidden=8, gat_heads=2, layers=1, attn_heads=2, t_max=128, seed=1))
    ego = sc.agents[0].agent_id
    grid = np.ones((sc.n_agents, sc.T), dtype=bool)
    grid[0] = False
    p_none = forward(sc, ego, None, m)
    p_full = forward(sc, ego, grid, m)
    assert 0 <= p_none <= 1 and 0 <= p_full <= 1
    assert forward(sc, ego, None, m) == p_none
    # all-False grid is bit-identical to no mask
    assert forward(sc, ego, np.zeros_like(grid), m) == p_none
    bad = np.zeros_like(grid)
    bad[0, 3] = True
    with pytest.raises(ValueError):
        forward(sc, ego, bad, m)


def test_forward_permutation_of_peers():
    cfg = ModelConfig(hidden=8, gat_heads=2, layers=1, attn_heads=2, t_max=8, seed=2)
    m = Model(cfg)
    s = _toy_inputs(1, N=4)
    a = float(forward_features(m, s, [1]).data[0])
    b = float(forward_features(m, s[:, :, [3, 1, 0, 2]], [1]).data[0])
    assert abs(a - b) < 1e-9


def test_model_round_trip(tmp_path):
    m = Model(TOY)
    path = tmp_path / "m.json"
    m.save(path)
    m2 = Model.load(path)
    assert m2.config == TOY
    for k, v in m.arrays().items():
        assert np.array_equal(v, m2.arrays()[k])
    s = _toy_inputs(2)
    assert np.array_equal(forward_features(m, s, [0]).data, forward_features(m2, s, [0]).data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, attn_heads=4)
