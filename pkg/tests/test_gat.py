from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpad import autodiff as ad
from cpad.autodiff import Tensor
from cpad.gat import gat_layer, graph_embed, init_fusion, masked_mean, pooled_gat_layer

M, HID, HEADS = 7, 5, 3


def params(seed=0):
    p = init_fusion(np.random.default_rng(seed), M, HID, HEADS)
    # a nonzero bias so the affine part is exercised
    p["fusion.pool.b"] = np.random.default_rng(seed + 1).normal(size=HID)
    return {k: Tensor(v) for k, v in p.items()}


def test_single_node_attends_to_itself():
    x = np.random.default_rng(0).normal(size=(1, M))
    p = params()
    trace = []
    out = gat_layer(x, p["fusion.gat1.W"], p["fusion.gat1.a"], HEADS, trace=trace)
    assert np.all(trace[0] == 1.0)
    assert np.allclose(out.data, x @ p["fusion.gat1.W"].data, atol=1e-12)


def test_identical_nodes_split_attention_evenly():
    x = np.tile(np.random.default_rng(1).normal(size=(1, M)), (2, 1))
    trace = []
    p = params()
    gat_layer(x, p["fusion.gat1.W"], p["fusion.gat1.a"], HEADS, trace=trace)
    assert np.allclose(trace[0], 0.5, atol=1e-15)


def test_zero_nodes_rejected():
    p = params()
    with pytest.raises(ValueError):
        gat_layer(np.zeros((0, M)), p["fusion.gat1.W"], p["fusion.gat1.a"], HEADS)
    with pytest.raises(ValueError):
        graph_embed(np.zeros((3, M)), p, HEADS, present=np.zeros(3, dtype=bool))


@pytest.mark.parametrize("seed", range(100))
def test_attention_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    present = rng.random(n) < 0.7
    present[0] = True
    trace = []
    graph_embed(rng.normal(size=(n, M)) * 3, params(seed), HEADS, present=present, trace=trace)
    for alpha in trace:
        assert alpha.min() >= 0
        assert np.all(np.abs(alpha.sum(axis=-1) - 1.0) < 1e-9)
        assert np.all(alpha[..., ~present] == 0.0)


def _replicate_oracle(v, p):
    # every node identical: attention is uniform and each layer reduces to its projection
    h1 = np.maximum(v @ p["fusion.gat1.W"].data, 0.0)
    h2 = h1 @ p["fusion.gat2.W"].data
    return h2 @ p["fusion.pool.W"].data + p["fusion.pool.b"].data


@pytest.mark.parametrize("n", [1, 2, 6])
def test_replicated_node_oracle(n):
    v = np.random.default_rng(5).normal(size=M)
    p = params(3)
    out = graph_embed(np.tile(v, (n, 1)), p, HEADS).data
    assert out.shape == (HID,)
    assert np.allclose(out, _replicate_oracle(v, p), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, M))
    perm = rng.permutation(n)
    p = params(seed % 7)
    a = graph_embed(x, p, HEADS).data
    b = graph_embed(x[perm], p, HEADS).data
    assert np.max(np.abs(a - b)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 6))
def test_masking_equals_deleting(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, M))
    gone = rng.random(n) < 0.4
    gone[int(rng.integers(n))] = False
    p = params(seed % 5)
    masked = graph_embed(x, p, HEADS, present=~gone).data
    deleted = graph_embed(x[~gone], p, HEADS).data
    # equal up to BLAS rounding, which depends on the matrix shapes
    assert np.allclose(masked, deleted, rtol=1e-12, atol=1e-14)
    # a masked node contributes nothing at all: its features are irrelevant bit for bit
    scrambled = x.copy()
    scrambled[gone] = rng.normal(size=(int(gone.sum()), M)) * 100
    assert np.array_equal(graph_embed(scrambled, p, HEADS, present=~gone).data, masked)


def test_output_width_independent_of_n():
    p = params()
    for n in range(1, 7):
        assert graph_embed(np.ones((n, M)), p, HEADS).shape == (HID,)


def test_batched_leading_dims():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, M))
    present = rng.random((2, 3, 4)) < 0.8
    present[..., 0] = True
    p = params()
    out = graph_embed(x, p, HEADS, present=present).data
    for i in range(2):
        for j in range(3):
            single = graph_embed(x[i, j], p, HEADS, present=present[i, j]).data
            assert np.allclose(out[i, j], single, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_pooled_layer_matches_mean_of_layer(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, n, HEADS * HID))
    present = rng.random((2, n)) < 0.7
    present[:, 0] = True
    p = params(seed % 3)
    W, a = p["fusion.gat2.W"], p["fusion.gat2.a"]
    fused = pooled_gat_layer(x, W, a, HEADS, present).data
    plain = masked_mean(gat_layer(x, W, a, HEADS, present), present).data
    assert np.allclose(fused, plain, rtol=1e-10, atol=1e-12)


def test_end_to_end_gradient_check():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, M))
    present = np.array([True, True, False, True])
    base = init_fusion(rng, M, HID, HEADS)
    w = rng.normal(size=HID)

    def loss_of(arrays):
        p = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return p, ad.sum_(graph_embed(x, p, HEADS, present=present) * Tensor(w))

    p, loss = loss_of(base)
    loss.backward()
    for key, value in base.items():
        fd = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            up = {**base, key: value.copy()}
            down = {**base, key: value.copy()}
            up[key][i] += 1e-5
            down[key][i] -= 1e-5
            fd[i] = (float(loss_of(up)[1].data) - float(loss_of(down)[1].data)) / 2e-5
        err = np.linalg.norm(p[key].grad - fd) / max(np.linalg.norm(p[key].grad) + np.linalg.norm(fd), 1e-12)
        assert err < 1e-4, f"{key}: {err:.2e}"
