"""Ray-cast perception: 240 lidar rays against vehicle footprints, 12 forward
lane-line rays and 12 surround road-edge rays against lane polylines."""
from __future__ import annotations

import numpy as np

from .core import N_LANE, N_LIDAR, N_SIDE, SensorFrame

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0

LIDAR_OFFSETS = np.arange(N_LIDAR) * (2 * np.pi / N_LIDAR)
LANE_OFFSETS = np.radians(np.linspace(-60.0, 60.0, N_LANE))
SIDE_OFFSETS = np.arange(N_SIDE) * (2 * np.pi / N_SIDE)


def ray_directions(headings: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Rotate unit headings ``(..., 2)`` by each offset -> ``(..., R, 2)``."""
    c, s = np.cos(offsets), np.sin(offsets)
    hx, hy = headings[..., 0:1], headings[..., 1:2]
    return np.stack([hx * c - hy * s, hx * s + hy * c], axis=-1)


def _ray_box(origins, dirs, centers, axes, half_len, half_wid):
    """Distances along rays to oriented rectangles, one rectangle per ray bundle.

    origins ``(K, 2)``, dirs ``(K, R, 2)``, centers/axes ``(K, 2)``. Returns
    ``(K, R)``: ``inf`` for a miss, 0 when the origin lies inside the box.
    """
    rel = origins - centers
    ax, ay = axes[:, 0:1], axes[:, 1:2]
    o_u = rel[:, 0:1] * ax + rel[:, 1:2] * ay
    o_v = -rel[:, 0:1] * ay + rel[:, 1:2] * ax
    dx, dy = dirs[..., 0], dirs[..., 1]
    d_u = dx * ax + dy * ay
    d_v = -dx * ay + dy * ax
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_u, inv_v = 1.0 / d_u, 1.0 / d_v
        a_u, b_u = (-half_len - o_u) * inv_u, (half_len - o_u) * inv_u
        a_v, b_v = (-half_wid - o_v) * inv_v, (half_wid - o_v) * inv_v
    t_near = np.fmax(np.fmin(a_u, b_u), np.fmin(a_v, b_v))
    t_far = np.fmin(np.fmax(a_u, b_u), np.fmax(a_v, b_v))
    hit = (t_far >= t_near) & (t_far >= 0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def _ray_segments(origins, dirs, seg_a, seg_b):
    """Distances from rays ``(..., R, 2)`` to fixed segments ``(S, 2)``; -> ``(..., R)``."""
    if len(seg_a) == 0:
        return np.full(dirs.shape[:-1], np.inf)
    q = seg_b - seg_a  # (S, 2)
    p = seg_a[None, :, :] - origins.reshape(-1, 1, 2)  # (P, S, 2)
    p = p.reshape(origins.shape[:-1] + (1,) + seg_a.shape)  # (..., 1, S, 2)
    d = dirs[..., None, :]  # (..., R, 1, 2)
    denom = d[..., 0] * q[:, 1] - d[..., 1] * q[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (p[..., 0] * q[:, 1] - p[..., 1] * q[:, 0]) / denom
        u = (p[..., 0] * d[..., 1] - p[..., 1] * d[..., 0]) / denom
    ok = (denom != 0) & (s >= 0) & (u >= 0) & (u <= 1)
    return np.where(ok, s, np.inf).min(axis=-1)


def _segments(polylines):
    a, b = [], []
    for line in polylines:
        line = np.asarray(line, dtype=float)
        a.append(line[:-1])
        b.append(line[1:])
    if not a:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(a), np.concatenate(b)


def cast_all(positions, headings, lanes, max_range: float = 50.0):
    """Sensor returns for every agent at every step.

    ``positions``/``headings`` are ``(T, N, 2)``. Returns ``lidar (T, N, 240)``,
    ``lane (T, N, 12)``, ``side (T, N, 12)``, each clamped to ``[0, max_range]``.
    Lane rays hit every boundary polyline; side rays only the road edges (first
    and last polylines).
    """
    pos = np.asarray(positions, dtype=float)
    head = np.asarray(headings, dtype=float)
    T, N, _ = pos.shape

    dirs = ray_directions(head, LIDAR_OFFSETS)  # (T, N, R, 2)
    lidar = np.full((T, N, N_LIDAR), np.inf)
    if N > 1:
        # only source/target pairs close enough for a return to fit in range
        gap = np.linalg.norm(pos[:, :, None, :] - pos[:, None, :, :], axis=-1)
        reach = max_range + 0.5 * np.hypot(VEHICLE_LENGTH, VEHICLE_WIDTH)
        t_idx, i_idx, j_idx = np.nonzero((gap <= reach) & ~np.eye(N, dtype=bool))
        if len(t_idx):
            dist = _ray_box(pos[t_idx, i_idx], dirs[t_idx, i_idx], pos[t_idx, j_idx], head[t_idx, j_idx],
                            VEHICLE_LENGTH / 2, VEHICLE_WIDTH / 2)
            # nonzero() yields (t, i) groups contiguously
            key = t_idx * N + i_idx
            starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
            lidar[t_idx[starts], i_idx[starts]] = np.minimum.reduceat(dist, starts, axis=0)

    lanes = list(lanes)
    all_a, all_b = _segments(lanes)
    edge_a, edge_b = _segments([lanes[0], lanes[-1]] if lanes else [])
    lane = _ray_segments(pos, ray_directions(head, LANE_OFFSETS), all_a, all_b)
    side = _ray_segments(pos, ray_directions(head, SIDE_OFFSETS), edge_a, edge_b)

    clamp = lambda x: np.clip(x, 0.0, max_range)  # noqa: E731
    return clamp(lidar), clamp(lane), clamp(side)


def raycast_sensors(positions, headings, lanes, agent_index: int, max_range: float = 50.0) -> SensorFrame:
    """Single-frame sensors for one agent given all agents' ``(N, 2)`` poses."""
    pos = np.asarray(positions, dtype=float)[None]
    head = np.asarray(headings, dtype=float)[None]
    lidar, lane, side = cast_all(pos, head, lanes, max_range)
    return SensorFrame(lidar[0, agent_index], lane[0, agent_index], side[0, agent_index])
