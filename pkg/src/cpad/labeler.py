"""Rule-based trajectory anomaly detectors and the aggregate labeler.

Every detector returns a list of inclusive ``(start, end)`` index intervals;
an empty list means the trajectory is clean for that anomaly type. All derived
series keep the trajectory length, with zeros where a stencil would reach past
either end.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import N_LIDAR, AgentTrajectory, AnomalyReport

DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class LabelerConfig:
    zigzag_window: int = 40
    zigzag_k_threshold: float = 0.5
    braking_window: int = 5
    braking_threshold: float = -4.0
    turn_threshold: float = 0.8
    lane_ma_window: int = 11
    lane_interval_threshold: int = 10
    tail_distance: float = 6.0
    tail_min_duration: int = 10
    tail_cone_deg: float = 60.0
    tail_corridor: float = 1.75
    dt: float = 0.1

    def __post_init__(self):
        for name in ("braking_window", "lane_ma_window"):
            w = getattr(self, name)
            if w < 3 or w % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {w}")
        if self.zigzag_window < 4 or self.zigzag_window % 4:
            raise ValueError(f"zigzag_window must be a positive multiple of 4, got {self.zigzag_window}")
        if not self.braking_threshold < 0:
            raise ValueError("braking_threshold must be negative")
        if not self.turn_threshold > 0:
            raise ValueError("turn_threshold must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> LabelerConfig:
        """Read flat ``key = value`` lines; keys are the field names."""
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_string("[labeler]\n" + fh.read())
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser["labeler"].items():
            if key not in kinds:
                raise ValueError(f"{path}: unknown labeler key {key!r}")
            values[key] = int(raw) if kinds[key] in (int, "int") else float(raw)
        values.update(overrides)
        return cls(**values)


# --- generic helpers ---------------------------------------------------------


def contiguous_intervals(indices) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers as inclusive ``(start, end)`` pairs."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def expand_intervals(intervals) -> np.ndarray:
    if not intervals:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(s, e + 1) for s, e in intervals])


def moving_average(data, w: int) -> np.ndarray:
    """Centered moving average ``D * (1/w) 1_w`` with zero padding at the ends."""
    d = np.asarray(data, dtype=float)
    if w < 1 or w % 2 == 0:
        raise ValueError(f"moving-average window must be odd, got {w}")
    if w > len(d):
        raise ValueError(f"moving-average window {w} exceeds series length {len(d)}")
    return np.convolve(d, np.ones(w) / w, mode="same")


# --- zigzag ------------------------------------------------------------------


def _central_diff(x: np.ndarray, h: int, dt: float) -> np.ndarray:
    out = np.zeros_like(x)
    out[h:-h] = (x[2 * h :] - x[: -2 * h]) / (2 * h * dt)
    return out


def curvature_series(headings, window: int = 40, dt: float = 0.1) -> np.ndarray:
    """Curvature of the heading-component curve, ``|x'y'' - y'x''| / (x'^2 + y'^2)^1.5``.

    First and second derivatives are central differences with half-stride
    ``window // 4`` samples, so the full second-derivative stencil spans
    ``window`` samples. Samples without a complete stencil get ``k = 0``.
    """
    h = np.asarray(headings, dtype=float)
    if len(h) < window + 2:
        raise ValueError(f"curvature needs at least {window + 2} samples, got {len(h)}")
    s = window // 4
    x, y = h[:, 0], h[:, 1]
    dx, dy = _central_diff(x, s, dt), _central_diff(y, s, dt)
    ddx, ddy = _central_diff(dx, s, dt), _central_diff(dy, s, dt)
    num = np.abs(dx * ddy - dy * ddx)
    den = np.maximum((dx * dx + dy * dy) ** 1.5, DENOM_FLOOR)
    k = num / den
    k[: 2 * s] = 0.0
    k[len(k) - 2 * s :] = 0.0
    return k


def detect_zigzag(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()):
    k = curvature_series(traj.headings, config.zigzag_window, config.dt)
    return contiguous_intervals(np.flatnonzero(k > config.zigzag_k_threshold))


# --- sudden braking --------------------------------------------------------


def smoothed_acceleration(speeds, w: int = 5, dt: float = 0.1) -> np.ndarray:
    """Centered-window acceleration ``(V[i+w/2] - V[i-w/2]) / (w dt)`` then a w-point moving mean.

    ``w`` is odd, so ``V[i +- w/2]`` falls halfway between samples and is read by
    linear interpolation. ``speeds`` may also be an ``(T, 6)`` state array.
    """
    v = np.asarray(speeds, dtype=float)
    if v.ndim == 2:
        v = np.hypot(v[:, 2], v[:, 3])
    if w % 2 == 0 or w < 1:
        raise ValueError(f"braking window must be odd, got {w}")
    n = len(v)
    if n < 2 * w:
        raise ValueError(f"smoothed acceleration needs at least {2 * w} samples, got {n}")
    half = w // 2
    acc = np.zeros(n)
    lo, hi = half + 1, n - half - 1  # interior where V[i-half-1] and V[i+half+1] exist
    i = np.arange(lo, hi)
    upper = 0.5 * (v[i + half] + v[i + half + 1])
    lower = 0.5 * (v[i - half - 1] + v[i - half])
    acc[lo:hi] = (upper - lower) / (w * dt)
    sa = np.zeros(n)
    if hi - lo >= w:
        sa[lo + half : hi - half] = np.convolve(acc[lo:hi], np.ones(w) / w, mode="valid")
    return sa


def detect_sudden_braking(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()):
    sa = smoothed_acceleration(traj.speeds, config.braking_window, config.dt)
    return contiguous_intervals(np.flatnonzero(sa < config.braking_threshold))


# --- sudden turns ----------------------------------------------------------


def angular_change_series(headings) -> np.ndarray:
    """Angle in radians between consecutive heading vectors; the first entry is 0."""
    h = np.asarray(headings, dtype=float)
    if len(h) < 2:
        raise ValueError("angular change needs at least 2 headings")
    norms = np.hypot(h[:, 0], h[:, 1])
    if np.any(norms == 0):
        raise ValueError("zero-length heading vector")
    u = h / norms[:, None]
    dots = np.clip(np.sum(u[:-1] * u[1:], axis=1), -1.0, 1.0)
    return np.concatenate([[0.0], np.arccos(dots)])


def lateral_acceleration(headings, speeds) -> np.ndarray:
    """``a_lat[i] = dtheta[i] * v[i+1]``; the last entry, lacking a next frame, is 0."""
    dtheta = angular_change_series(headings)
    v = np.asarray(speeds, dtype=float)
    a = np.zeros(len(dtheta))
    a[:-1] = dtheta[:-1] * v[1:]
    return a


def detect_sudden_turns(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()):
    a_lat = lateral_acceleration(traj.headings, traj.speeds)
    return contiguous_intervals(np.flatnonzero(np.abs(a_lat) > config.turn_threshold))


# --- lane weaving ------------------------------------------------------------


def detect_lane_weaving(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()):
    m = moving_average(traj.lane_cross.astype(float), config.lane_ma_window)
    runs = contiguous_intervals(np.flatnonzero(m > 0.5))
    return [(s, e) for s, e in runs if e - s + 1 > config.lane_interval_threshold]


# --- tailgating --------------------------------------------------------------


def forward_proximity(lidar, cone_deg: float = 60.0, corridor: float | None = 1.75) -> np.ndarray:
    """Per-step minimum lidar distance over the forward cone.

    Rays whose return point lies farther than ``corridor`` to either side of the
    heading axis are ignored (``None`` keeps every ray in the cone), so vehicles
    in neighbouring lanes do not count as being followed.
    """
    lidar = np.asarray(lidar, dtype=float)
    n = lidar.shape[1]
    ang = np.arange(n) * (2 * np.pi / n)
    ang = np.where(ang > np.pi, ang - 2 * np.pi, ang)
    in_cone = np.abs(ang) <= np.radians(cone_deg) / 2 + 1e-12
    d = lidar[:, in_cone]
    if corridor is not None:
        lateral = np.abs(d * np.sin(ang[in_cone]))
        d = np.where(lateral <= corridor, d, np.inf)
    return d.min(axis=1)


def detect_tailgating(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()):
    assert traj.lidar.shape[1] == N_LIDAR
    prox = forward_proximity(traj.lidar, config.tail_cone_deg, config.tail_corridor)
    runs = contiguous_intervals(np.flatnonzero(prox < config.tail_distance))
    return [(s, e) for s, e in runs if e - s + 1 >= config.tail_min_duration]


DETECTORS = {
    "Zigzag": detect_zigzag,
    "SuddenBraking": detect_sudden_braking,
    "SuddenTurn": detect_sudden_turns,
    "LaneWeaving": detect_lane_weaving,
    "Tailgating": detect_tailgating,
}


def label_trajectory(traj: AgentTrajectory, config: LabelerConfig = LabelerConfig()) -> AnomalyReport:
    intervals = {}
    for name, detect in DETECTORS.items():
        found = detect(traj, config)
        if found:
            intervals[name] = found
    return AnomalyReport(bool(intervals), tuple(intervals), intervals)


def label_scenario(scenario, config: LabelerConfig | None = None):
    config = dataclasses.replace(config or LabelerConfig(), dt=scenario.dt)
    return scenario.with_agents(a.with_label(label_trajectory(a, config)) for a in scenario.agents)
