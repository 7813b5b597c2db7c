"""Spatial fusion: stacked multi-head graph attention over the agents present
at one timestep, then global mean pooling and an affine projection.

Node features carry a leading batch shape ``(..., N, m)`` so whole batches of
timesteps run through one set of array operations. ``present`` marks which
nodes exist; absent nodes are excluded as attention keys and from the pool, so
masking a node is the same as deleting it.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_FILL = -1e30


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_gat_layer(rng, in_dim: int, hidden: int, heads: int) -> dict[str, np.ndarray]:
    return {
        "W": glorot(rng, in_dim, heads * hidden),
        "a": glorot(rng, 2 * hidden, 1, shape=(heads, 2 * hidden)),
    }


def init_fusion(rng, in_dim: int, hidden: int, heads: int) -> dict[str, np.ndarray]:
    params = {}
    for name, layer in (("gat1", init_gat_layer(rng, in_dim, hidden, heads)),
                        ("gat2", init_gat_layer(rng, heads * hidden, hidden, heads))):
        for k, v in layer.items():
            params[f"fusion.{name}.{k}"] = v
    params["fusion.pool.W"] = glorot(rng, heads * hidden, hidden)
    params["fusion.pool.b"] = np.zeros(hidden)
    return params


def _key_bias(present: np.ndarray | None) -> np.ndarray | None:
    if present is None:
        return None
    # (..., N) -> (..., 1, 1, N): broadcast over heads and query rows
    return np.where(present, 0.0, MASK_FILL)[..., None, None, :]


def _scores(projected: Tensor, a: Tensor, heads: int, n: int, present, trace) -> Tensor:
    """Attention weights ``(..., K, N_i, N_j)`` from projected features ``(..., N, K*n)``
    (or from any features, when ``a`` has already been folded through ``W``)."""
    *lead, N, _ = projected.shape
    s_src = ad.swapaxes(projected @ a[0], -1, -2).reshape(*lead, heads, N, 1)
    s_dst = ad.swapaxes(projected @ a[1], -1, -2).reshape(*lead, heads, 1, N)
    e = ad.leaky_relu(s_src + s_dst)
    bias = _key_bias(present)
    if bias is not None:
        e = e + bias
    alpha = ad.softmax(e, axis=-1)
    if trace is not None:
        trace.append(alpha.data)
    return alpha


def _head_blocks(a: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    # block-diagonal (K*n, K) matrices turn the per-head dot products a.h' into one matmul
    n = a.shape[1] // 2
    blocks = np.eye(heads)[:, None, :]
    a_src = (a[:, :n].reshape(heads, n, 1) * blocks).reshape(heads * n, heads)
    a_dst = (a[:, n:].reshape(heads, n, 1) * blocks).reshape(heads * n, heads)
    return a_src, a_dst


def attend(projected: Tensor, a: Tensor, heads: int, present=None, trace: list | None = None) -> Tensor:
    """Attention and aggregation for already-projected node features ``(..., N, K*n)``."""
    *lead, N, width = projected.shape
    if N == 0:
        raise ValueError("graph attention needs at least one node")
    n = width // heads
    alpha = _scores(projected, _head_blocks(a, heads), heads, n, present, trace)
    h = ad.swapaxes(projected.reshape(*lead, N, heads, n), -2, -3)  # (..., K, N, n)
    out = alpha @ h  # (..., K, N, n)
    return ad.swapaxes(out, -2, -3).reshape(*lead, N, heads * n)


def pooled_gat_layer(x, W, a, heads: int, present=None, trace: list | None = None) -> Tensor:
    """``masked_mean(gat_layer(x, W, a, heads, present))`` without forming per-node outputs.

    The mean over queries commutes with the linear parts: per head it equals
    ``(mean_i alpha_ij) x_j`` summed over ``j`` and then multiplied by ``W_k``,
    and the attention logits only need ``x (W_k a)``. Shape ``(..., K*n)``.
    """
    x, W, a = ad.as_tensor(x), ad.as_tensor(W), ad.as_tensor(a)
    *lead, N, m = x.shape
    if m != W.shape[0]:
        raise ad.ShapeError(f"pooled_gat_layer: features {x.shape} do not match weights {W.shape}")
    n = W.shape[1] // heads
    a_src, a_dst = _head_blocks(a, heads)
    alpha = _scores(x, (W @ a_src, W @ a_dst), heads, n, present, trace)  # (..., K, N, N)
    if present is None:
        beta = alpha.mean(axis=-2)
    else:
        p = np.asarray(present, dtype=float)
        count = p.sum(axis=-1, keepdims=True)
        if np.any(count == 0):
            raise ValueError("graph has no present nodes")
        beta = (alpha * p[..., None, :, None]).sum(axis=-2) / count[..., None]
    mixed = beta @ x  # (..., K, m)
    rows = int(np.prod(lead, dtype=int))
    per_head = ad.swapaxes(mixed.reshape(rows, heads, m), 0, 1)  # (K, rows, m)
    W_heads = ad.swapaxes(W.reshape(m, heads, n), 0, 1)  # (K, m, n)
    out = ad.swapaxes(per_head @ W_heads, 0, 1)  # (rows, K, n)
    return out.reshape(*lead, heads * n)


def gat_layer(x, W, a, heads: int, present=None, trace: list | None = None) -> Tensor:
    """One graph-attention layer over a complete graph with self loops.

    Per head: ``h' = x W``, ``e_ij = LeakyReLU(a . [h'_i || h'_j])``, ``alpha``
    is the softmax of ``e`` over the present ``j``, and the head output is
    ``sum_j alpha_ij h'_j``. Heads are concatenated to width ``K * n``.
    """
    x = ad.as_tensor(x)
    W = ad.as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"gat_layer: features {x.shape} do not match weights {W.shape}")
    return attend(x @ W, ad.as_tensor(a), heads, present, trace)


def masked_mean(h: Tensor, present=None) -> Tensor:
    """Mean over the node axis (``-2``) of the present nodes only."""
    if present is None:
        return h.mean(axis=-2)
    p = np.asarray(present, dtype=float)
    count = p.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ValueError("graph has no present nodes")
    return (h * p[..., None]).sum(axis=-2) / count


def graph_embed(x, params: dict, heads: int, present=None, trace: list | None = None, projected=None) -> Tensor:
    """Two GAT layers with ReLU between, mean over present nodes, then ``W' mean + b``.

    ``projected`` may supply ``x @ W1`` precomputed (the trainer shares the
    sensor part of that product between samples from the same scene).
    """
    if projected is None:
        projected = ad.as_tensor(x) @ params["fusion.gat1.W"]
    h = attend(projected, params["fusion.gat1.a"], heads, present, trace)
    h = ad.relu(h)
    pooled = pooled_gat_layer(h, params["fusion.gat2.W"], params["fusion.gat2.a"], heads, present, trace)
    if pooled.ndim == 1:
        # a single unbatched graph
        out = ad.bias_add(pooled.reshape(1, -1) @ params["fusion.pool.W"], params["fusion.pool.b"])
        return out.reshape(-1)
    return ad.bias_add(pooled @ params["fusion.pool.W"], params["fusion.pool.b"])
