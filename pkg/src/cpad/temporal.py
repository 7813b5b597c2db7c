"""Temporal half of the model: a pre-norm transformer encoder over the
per-timestep graph embeddings, attention pooling over time and a sigmoid
classifier. Also home to the parameter container and its JSON persistence.

Parameter paths (the keys of ``Model.params`` and of the model file's
``weights`` object)::

    fusion.gat1.W  (in_dim, K*n)     fusion.gat1.a  (K, 2n)
    fusion.gat2.W  (K*n, K*n)        fusion.gat2.a  (K, 2n)
    fusion.pool.W  (K*n, n)          fusion.pool.b  (n,)
    encoder.{l}.ln1.gain/bias (n,)   encoder.{l}.attn.Wq/Wk/Wv/Wo (n, n)
    encoder.{l}.attn.bo (n,)         encoder.{l}.ln2.gain/bias (n,)
    encoder.{l}.ffn.W1 (n, F*n)      encoder.{l}.ffn.b1 (F*n,)
    encoder.{l}.ffn.W2 (F*n, n)      encoder.{l}.ffn.b2 (n,)
    head.w_ap (n,)   head.Wc (n, 1)  head.bc (1,)
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import SENSOR_DIM, Scenario
from .gat import glorot, graph_embed, init_fusion

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = SENSOR_DIM + 1
    hidden: int = 64
    gat_heads: int = 4
    layers: int = 2
    attn_heads: int = 4
    ffn_mult: int = 4
    t_max: int = 128
    sensor_scale: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.attn_heads:
            raise ValueError("hidden width must be divisible by attn_heads")
        if min(self.hidden, self.gat_heads, self.layers, self.attn_heads, self.ffn_mult, self.t_max) < 1:
            raise ValueError("model dimensions must be positive")


def positional_table(t_max: int, width: int) -> np.ndarray:
    pos = np.arange(t_max)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    n, F = config.hidden, config.ffn_mult
    params = init_fusion(rng, config.in_dim, n, config.gat_heads)
    for l in range(config.layers):
        p = f"encoder.{l}."
        params[p + "ln1.gain"] = np.ones(n)
        params[p + "ln1.bias"] = np.zeros(n)
        for m in ("Wq", "Wk", "Wv", "Wo"):
            params[p + "attn." + m] = glorot(rng, n, n)
        params[p + "attn.bo"] = np.zeros(n)
        params[p + "ln2.gain"] = np.ones(n)
        params[p + "ln2.bias"] = np.zeros(n)
        params[p + "ffn.W1"] = glorot(rng, n, F * n)
        params[p + "ffn.b1"] = np.zeros(F * n)
        params[p + "ffn.W2"] = glorot(rng, F * n, n)
        params[p + "ffn.b2"] = np.zeros(n)
    params["head.w_ap"] = glorot(rng, n, 1, shape=(n,))
    params["head.Wc"] = glorot(rng, n, 1)
    params["head.bc"] = np.zeros(1)
    return params


class Model:
    """Hyperparameters plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        raw = init_params(config) if params is None else params
        self.params = {k: Tensor(np.array(v, dtype=float), requires_grad=True, name=k) for k, v in raw.items()}
        self._pos = positional_table(config.t_max, config.hidden)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.asarray(v, dtype=float)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def to_json(self) -> dict:
        return {
            "hyperparams": dataclasses.asdict(self.config),
            "weights": {k: t.data.ravel().tolist() for k, t in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> Model:
        config = ModelConfig(**obj["hyperparams"])
        template = init_params(config)
        weights = obj["weights"]
        missing = set(template) - set(weights)
        if missing:
            raise ValueError(f"model file lacks weights {sorted(missing)[:3]}")
        params = {k: np.asarray(weights[k], dtype=float).reshape(v.shape) for k, v in template.items()}
        return cls(config, params)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path: str | Path) -> Model:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# --- encoder -----------------------------------------------------------------


def self_attention(x: Tensor, params: dict, prefix: str, heads: int, trace: list | None = None) -> Tensor:
    *lead, T, n = x.shape
    d = n // heads

    def split(t):
        return ad.swapaxes(t.reshape(*lead, T, heads, d), -2, -3)  # (..., H, T, d)

    q = split(x @ params[prefix + "Wq"])
    k = split(x @ params[prefix + "Wk"])
    v = split(x @ params[prefix + "Wv"])
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    weights = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(weights.data)
    ctx = ad.swapaxes(weights @ v, -2, -3).reshape(*lead, T, n)
    return ad.bias_add(ctx @ params[prefix + "Wo"], params[prefix + "bo"])


def encode_sequence(h, params: dict, config: ModelConfig, trace: list | None = None) -> Tensor:
    """Add sinusoidal positions and apply the pre-norm encoder layers to ``(..., T, n)``."""
    h = ad.as_tensor(h)
    T = h.shape[-2]
    if not 1 <= T <= config.t_max:
        raise ValueError(f"sequence length {T} outside [1, {config.t_max}]")
    x = h + positional_table(config.t_max, config.hidden)[:T]
    for l in range(config.layers):
        p = f"encoder.{l}."
        y = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        x = x + self_attention(y, params, p + "attn.", config.attn_heads, trace)
        y = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        y = ad.relu(ad.bias_add(y @ params[p + "ffn.W1"], params[p + "ffn.b1"]))
        x = x + ad.bias_add(y @ params[p + "ffn.W2"], params[p + "ffn.b2"])
    return x


def attention_pool(seq, w_ap, trace: list | None = None) -> Tensor:
    """``z = sum_t softmax_t(w_ap . x_t) x_t`` over the time axis (``-2``)."""
    seq, w_ap = ad.as_tensor(seq), ad.as_tensor(w_ap)
    if seq.shape[-2] == 0:
        raise ValueError("attention pooling over an empty sequence")
    scores = (seq * w_ap).sum(axis=-1)  # (..., T)
    weights = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(weights.data)
    return (seq * weights.reshape(*weights.shape, 1)).sum(axis=-2)


def classify(z, Wc, bc) -> tuple[Tensor, np.ndarray]:
    """Sigmoid probability and boolean label (anomalous iff p > 0.5)."""
    z = ad.as_tensor(z)
    lead = z.shape[:-1]
    logit = ad.bias_add(z.reshape(-1, z.shape[-1]) @ Wc, bc)
    p = ad.sigmoid(logit).reshape(lead)
    return p, p.data > 0.5


def bce_loss(probs, labels, pos_weight: float = 3.0) -> Tensor:
    """Mean of ``-[w y log p + (1 - y) log(1 - p)]`` with p clamped to [1e-7, 1 - 1e-7]."""
    probs = ad.as_tensor(probs)
    y = np.asarray(labels, dtype=float)
    if probs.shape != y.shape:
        raise ValueError(f"bce_loss: {probs.shape[0] if probs.ndim else 1} probabilities vs {y.size} labels")
    p = ad.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = ad.log(p) * (pos_weight * y) + ad.log(1.0 - p) * (1.0 - y)
    return -terms.mean()


# --- full forward pass -----------------------------------------------------------


def node_features(sensors: np.ndarray, ego_index: int, scale: float) -> np.ndarray:
    """``(T, N, 264)`` sensor returns -> ``(T, N, 265)`` scaled features plus ego bit."""
    T, N, _ = sensors.shape
    ego = np.zeros((T, N, 1))
    ego[:, ego_index, 0] = 1.0
    return np.concatenate([sensors / scale, ego], axis=-1)


def forward_features(model: Model, sensors, ego_index, present=None, scene_index=None, trace=None) -> Tensor:
    """Batched forward pass returning anomaly probabilities ``(B,)``.

    ``sensors`` is ``(U, T, N, 264)`` in metres (a Tensor or array). Sample ``b``
    reads scene ``scene_index[b]`` (default ``b``) with ego node
    ``ego_index[b]``; ``present`` is ``(B, T, N)`` or None for all present.
    The sensor projection is computed once per scene and shared by its samples.
    """
    cfg, P = model.config, model.params
    ego_index = np.asarray(ego_index, dtype=np.intp).reshape(-1)
    B = len(ego_index)
    sensors = ad.as_tensor(sensors)
    U, T, N, _ = sensors.shape
    scene_index = np.arange(B) if scene_index is None else np.asarray(scene_index, dtype=np.intp)
    if present is not None:
        present = np.asarray(present, dtype=bool)
        if present.all():
            present = None  # same arithmetic as an unmasked pass
        elif not np.all(present[np.arange(B), :, ego_index]):
            raise ValueError("ego node must be present at every timestep")

    W1 = P["fusion.gat1.W"]
    sensor_proj = (sensors * (1.0 / cfg.sensor_scale)) @ W1[: cfg.in_dim - 1]  # (U, T, N, K*n)
    if U == B and np.array_equal(scene_index, np.arange(B)):
        proj = sensor_proj
    else:
        proj = ad.take(sensor_proj, scene_index, axis=0)
    onehot = np.zeros((B, 1, N, 1))
    onehot[np.arange(B), 0, ego_index, 0] = 1.0
    proj = proj + onehot * W1[cfg.in_dim - 1]

    h_graph = graph_embed(None, P, cfg.gat_heads, present, trace, projected=proj)  # (B, T, n)
    h_seq = encode_sequence(h_graph, P, cfg, trace)
    z = attention_pool(h_seq, P["head.w_ap"], trace)
    prob, _ = classify(z, P["head.Wc"], P["head.bc"])
    return prob


def scenario_sensors(scenario: Scenario) -> np.ndarray:
    """``(T, N, 264)`` array of every agent's lidar, lane and side returns."""
    return np.stack([a.sensor_matrix() for a in scenario.agents], axis=1)


def forward(scenario: Scenario, ego_id: str, mask, model: Model, trace: list | None = None) -> float:
    """Anomaly probability for one ego trajectory under an optional blackout mask.

    ``mask`` is None, a boolean ``(N, T)`` grid (True = blacked out) or any
    object with such a ``grid`` attribute.
    """
    ego = scenario.agent_index(ego_id)
    present = np.ones((1, scenario.T, scenario.n_agents), dtype=bool)
    if mask is not None:
        grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
        if grid.shape != (scenario.n_agents, scenario.T):
            raise ValueError(f"mask shape {grid.shape} does not match scenario ({scenario.n_agents}, {scenario.T})")
        if grid[ego].any():
            raise ValueError("blackout mask covers the ego agent")
        present = ~grid.T[None]
    sensors = scenario_sensors(scenario)[None]
    return float(forward_features(model, sensors, [ego], present, trace=trace).data[0])
