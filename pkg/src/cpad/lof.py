"""Local Outlier Factor baseline over hand-built trajectory summaries.

Neighbourhoods follow the classic definition: the k-neighbourhood of ``p`` is
every other point within its k-distance (ties included), so it may hold more
than ``k`` points. Distances are floored at ``EPS`` so duplicate points give
finite densities; a set of identical points scores 1.0 everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AgentTrajectory
from .labeler import (LabelerConfig, angular_change_series, curvature_series, forward_proximity,
                      smoothed_acceleration)

EPS = 1e-12

FEATURE_NAMES = (
    "speed_mean", "speed_std", "speed_max",
    "abs_sa_mean", "abs_sa_std", "abs_sa_max",
    "dtheta_mean", "dtheta_std", "dtheta_max",
    "curvature_max",
    "lane_cross_rate",
    "min_forward_proximity",
)


@dataclass(frozen=True)
class LofConfig:
    k: int = 20
    threshold: float = 1.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")


def _stats(x: np.ndarray) -> list[float]:
    return [float(x.mean()), float(x.std()), float(x.max())]


def featurize_trajectory(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()) -> np.ndarray:
    """Twelve summary statistics of one trajectory, in ``FEATURE_NAMES`` order.

    Series too short for a smoothing window contribute zeros.
    """
    speeds = traj.speeds
    T = len(speeds)
    sa = smoothed_acceleration(speeds, config.braking_window, config.dt) if T >= 2 * config.braking_window \
        else np.zeros(T)
    dtheta = angular_change_series(traj.headings)
    k = curvature_series(traj.headings, config.zigzag_window, config.dt) if T >= config.zigzag_window + 2 \
        else np.zeros(T)
    prox = forward_proximity(traj.lidar, config.tail_cone_deg, config.tail_corridor)
    feats = _stats(speeds) + _stats(np.abs(sa)) + _stats(dtheta)
    feats += [float(k.max()), float(np.mean(traj.lane_cross)), float(prox.min())]
    return np.array(feats)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences keep identical points at exactly zero distance
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def _neighbourhoods(queries, ref, k: int, exclude_self: bool, chunk: int = 64):
    """Per query: k-distance and the indices/distances of its k-neighbourhood in ``ref``."""
    kdist = np.empty(len(queries))
    hoods = []
    for lo in range(0, len(queries), chunk):
        d = _pairwise(queries[lo:lo + chunk], ref)
        if exclude_self:
            d[np.arange(len(d)), np.arange(lo, lo + len(d))] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        kdist[lo:lo + len(d)] = kth
        for row, r in zip(d, kth):
            idx = np.flatnonzero(row <= r)
            hoods.append((idx, row[idx]))
    return kdist, hoods


def _lrd(hoods, ref_kdist: np.ndarray) -> np.ndarray:
    out = np.empty(len(hoods))
    for i, (idx, dist) in enumerate(hoods):
        reach = np.maximum(np.maximum(ref_kdist[idx], dist), EPS)
        out[i] = 1.0 / reach.mean()
    return out


class LofModel:
    """Reference set with cached k-distances and densities."""

    def __init__(self, points, k: int = 20):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        if len(pts) < k + 1:
            raise ValueError(f"LOF with k={k} needs at least {k + 1} points, got {len(pts)}")
        self.points, self.k = pts, k
        self.kdist, hoods = _neighbourhoods(pts, pts, k, exclude_self=True)
        self.lrd = _lrd(hoods, self.kdist)
        self.train_scores = np.array([self.lrd[idx].mean() for idx, _ in hoods]) / self.lrd

    def score(self, queries) -> np.ndarray:
        q = np.asarray(queries, dtype=float).reshape(-1, self.points.shape[1])
        _, hoods = _neighbourhoods(q, self.points, self.k, exclude_self=False)
        lrd_q = _lrd(hoods, self.kdist)
        return np.array([self.lrd[idx].mean() for idx, _ in hoods]) / lrd_q


def lof_scores(points, k: int = 20) -> np.ndarray:
    """LOF of every point with respect to the others (exhaustive search)."""
    return LofModel(points, k).train_scores


def lof_classify(train_points, test_points, config: LofConfig = LofConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Fit on ``train_points`` (labels unused) and return ``(labels, scores)`` for the test set.

    A test point is anomalous iff its LOF exceeds ``config.threshold``.
    """
    scores = LofModel(train_points, config.k).score(test_points)
    return (scores > config.threshold).astype(int), scores
