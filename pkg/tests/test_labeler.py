from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpad.core import N_LIDAR
from cpad.labeler import (DETECTORS, LabelerConfig, angular_change_series, contiguous_intervals,
                          curvature_series, detect_lane_weaving, detect_sudden_braking, detect_sudden_turns,
                          detect_tailgating, detect_zigzag, expand_intervals, forward_proximity,
                          label_trajectory, lateral_acceleration, moving_average, smoothed_acceleration)
from conftest import make_traj, states_from_speed_heading, straight_states

CFG = LabelerConfig()


# --- helpers -------------------------------------------------------------------


def test_contiguous_intervals_examples():
    assert contiguous_intervals([]) == []
    assert contiguous_intervals([1, 2, 3, 7, 8]) == [(1, 3), (7, 8)]
    assert contiguous_intervals([5]) == [(5, 5)]


@given(st.sets(st.integers(0, 200)))
def test_contiguous_intervals_inverts_expansion(idx):
    idx = sorted(idx)
    runs = contiguous_intervals(idx)
    assert expand_intervals(runs).tolist() == idx
    # maximal: consecutive runs are separated by a gap
    assert all(b[0] > a[1] + 1 for a, b in zip(runs, runs[1:]))


def test_moving_average_examples():
    assert np.all(moving_average(np.zeros(9), 3) == 0)
    np.testing.assert_allclose(moving_average([0, 0, 1, 1, 1, 0, 0], 3), [0, 1 / 3, 2 / 3, 1, 2 / 3, 1 / 3, 0],
                               atol=1e-15)
    assert np.allclose(moving_average(np.ones(20), 5)[2:-2], 1.0)
    with pytest.raises(ValueError):
        moving_average(np.ones(5), 7)
    with pytest.raises(ValueError):
        moving_average(np.ones(10), 4)


@given(st.lists(st.integers(0, 1), min_size=11, max_size=80), st.sampled_from([3, 5, 11]))
def test_moving_average_preserves_range(d, w):
    m = moving_average(d, w)
    interior = m[w // 2: len(d) - w // 2]
    assert np.all(interior >= min(d) - 1e-12) and np.all(interior <= max(d) + 1e-12)


def test_config_validation_and_file(tmp_path):
    for bad in ({"braking_window": 4}, {"lane_ma_window": 1}, {"braking_threshold": 1.0}, {"turn_threshold": 0.0}):
        with pytest.raises(ValueError):
            LabelerConfig(**bad)
    path = tmp_path / "lab.cfg"
    path.write_text("turn_threshold = 1.1\nbraking_window = 7\n")
    cfg = LabelerConfig.from_file(path)
    assert cfg.turn_threshold == 1.1 and cfg.braking_window == 7
    path.write_text("nonsense = 3\n")
    with pytest.raises(ValueError):
        LabelerConfig.from_file(path)


# --- curvature / zigzag -----------------------------------------------------------


def test_constant_heading_has_zero_curvature():
    assert np.all(curvature_series(straight_states()[:, 4:6]) == 0)


def test_unit_rate_rotation_curvature_is_one():
    dt = 0.01
    t = np.arange(400) * dt
    k = curvature_series(np.stack([np.cos(t), np.sin(t)], 1), 40, dt)
    interior = k[20:-20]
    assert np.all(np.abs(interior - 1.0) < 0.02)
    assert np.all(k[:20] == 0) and np.all(k[-20:] == 0)


def test_chirped_heading_matches_analytic_curvature():
    # any heading on the unit circle with nonzero turn rate traces curvature 1 analytically
    dt = 0.001
    t = np.arange(4000) * dt
    phi = 0.5 * t + 0.8 * t**2
    k = curvature_series(np.stack([np.cos(phi), np.sin(phi)], 1), 40, dt)
    interior = k[20:-20]
    assert np.max(np.abs(interior - 1.0)) < 0.05


def test_curvature_too_short():
    with pytest.raises(ValueError):
        curvature_series(np.tile([1.0, 0.0], (41, 1)), 40)


def test_zigzag_straight_is_empty():
    assert detect_zigzag(make_traj(), CFG) == []


def test_zigzag_threshold_is_strict():
    t = np.arange(100) * 0.1
    states = states_from_speed_heading(np.full(100, 10.0), 0.1 * np.sin(2 * np.pi * t / 1.5))
    traj = make_traj(states)
    k = curvature_series(traj.headings, 40, 0.1)
    top = k.max()
    at = detect_zigzag(traj, dataclasses.replace(CFG, zigzag_k_threshold=top))
    assert int(np.argmax(k)) not in expand_intervals(at)
    below = detect_zigzag(traj, dataclasses.replace(CFG, zigzag_k_threshold=np.nextafter(top, 0)))
    assert int(np.argmax(k)) in expand_intervals(below)


# --- braking -----------------------------------------------------------------------


def test_smoothed_acceleration_constant_and_linear():
    assert np.all(smoothed_acceleration(np.full(50, 12.0), 5, 0.1) == 0)
    t = np.arange(100) * 0.1
    sa = smoothed_acceleration(10 - 2 * t, 5, 0.1)
    interior = sa[sa != 0]
    assert len(interior) > 80
    assert np.max(np.abs(interior + 2.0)) < 1e-9


def test_smoothed_acceleration_accepts_states():
    states = states_from_speed_heading(np.linspace(15, 5, 60), np.zeros(60))
    np.testing.assert_array_equal(smoothed_acceleration(states, 5, 0.1),
                                  smoothed_acceleration(np.linspace(15, 5, 60), 5, 0.1))


def test_smoothed_acceleration_errors():
    with pytest.raises(ValueError):
        smoothed_acceleration(np.ones(50), 4)
    with pytest.raises(ValueError):
        smoothed_acceleration(np.ones(9), 5)


def test_braking_constant_speed_empty():
    assert detect_sudden_braking(make_traj(), CFG) == []


def test_braking_threshold_is_strict():
    speeds = np.concatenate([np.full(40, 15.0), 15.0 - 0.8 * np.arange(1, 11), np.full(50, 7.0)])
    traj = make_traj(states_from_speed_heading(speeds, np.zeros(100)))
    sa = smoothed_acceleration(traj.speeds, 5, 0.1)
    low = sa.min()
    assert low < -4.0
    flagged = expand_intervals(detect_sudden_braking(traj, dataclasses.replace(CFG, braking_threshold=low)))
    assert int(np.argmin(sa)) not in flagged
    flagged = expand_intervals(detect_sudden_braking(traj, dataclasses.replace(CFG, braking_threshold=np.nextafter(low, 0))))
    assert int(np.argmin(sa)) in flagged


# --- turns ---------------------------------------------------------------------------


def test_angular_change_examples():
    assert np.all(angular_change_series(np.tile([0.6, 0.8], (5, 1))) == 0)
    d = angular_change_series(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert d[0] == 0 and abs(d[1] - np.pi / 2) < 1e-12
    # rounding pushes the dot product just past 1; the clip keeps arccos finite
    h = np.array([[1.0, 1e-9], [1.0, 1e-9 + 1e-17]])
    assert np.all(np.isfinite(angular_change_series(h)))
    with pytest.raises(ValueError):
        angular_change_series(np.array([[1.0, 0.0], [0.0, 0.0]]))


def _turn(dtheta: float, v_next: float):
    headings = np.array([[1.0, 0.0], [np.cos(dtheta), np.sin(dtheta)], [np.cos(dtheta), np.sin(dtheta)]])
    return headings, np.array([8.0, 8.0, v_next])


def test_lateral_acceleration_formula():
    h, v = _turn(0.2, 8.0)
    a = lateral_acceleration(h, v)
    assert abs(a[1] - 1.6) < 1e-12 and a[-1] == 0


def test_turn_threshold_examples():
    h, v = _turn(0.1, 8.0)
    a = lateral_acceleration(h, v)
    assert abs(a[1] - 0.8) < 1e-12
    assert not np.any(np.abs(a) > CFG.turn_threshold)  # equal to tau: not flagged
    h, v = _turn(0.2, 8.0)
    assert np.flatnonzero(np.abs(lateral_acceleration(h, v)) > CFG.turn_threshold).tolist() == [1]


def test_turn_detector_strict_at_exact_value():
    angles = np.zeros(100)
    angles[50:] = 0.15
    traj = make_traj(states_from_speed_heading(np.full(100, 10.0), angles))
    a = lateral_acceleration(traj.headings, traj.speeds)
    assert detect_sudden_turns(traj, dataclasses.replace(CFG, turn_threshold=float(a.max()))) == []
    assert detect_sudden_turns(traj, dataclasses.replace(CFG, turn_threshold=float(np.nextafter(a.max(), 0)))) == [(50, 50)]
    assert detect_sudden_turns(make_traj(), CFG) == []


# --- lane weaving ---------------------------------------------------------------------


def test_lane_weaving_examples():
    assert detect_lane_weaving(make_traj(), CFG) == []
    burst = np.zeros(100, dtype=bool)
    burst[40:43] = True
    assert detect_lane_weaving(make_traj(lane_cross=burst), CFG) == []
    weave = np.zeros(100, dtype=bool)
    weave[30:60] = True
    assert detect_lane_weaving(make_traj(lane_cross=weave), CFG) != []


def test_lane_interval_length_is_strict():
    # a straddle of s samples yields M > 0.5 on s - 5 samples with w = 11... measured directly
    for length in range(8, 30):
        flags = np.zeros(100, dtype=bool)
        flags[30:30 + length] = True
        m = moving_average(flags.astype(float), 11)
        run = int(np.sum(m > 0.5))
        hit = detect_lane_weaving(make_traj(lane_cross=flags), CFG) != []
        assert hit == (run > CFG.lane_interval_threshold)


# --- tailgating --------------------------------------------------------------------


def test_tailgating_lone_agent_and_single_dip():
    assert detect_tailgating(make_traj(), CFG) == []
    lidar = np.full((100, N_LIDAR), 50.0)
    lidar[40, 0] = 3.0
    assert detect_tailgating(make_traj(lidar=lidar), CFG) == []


def test_tailgating_duration_boundary():
    for run, expected in ((9, False), (10, True)):
        lidar = np.full((100, N_LIDAR), 50.0)
        lidar[20:20 + run, 0] = 4.0
        assert (detect_tailgating(make_traj(lidar=lidar), CFG) != []) is expected


def test_tailgating_distance_is_strict():
    lidar = np.full((100, N_LIDAR), 50.0)
    lidar[20:40, 0] = 6.0
    assert detect_tailgating(make_traj(lidar=lidar), CFG) == []
    lidar[20:40, 0] = np.nextafter(6.0, 0)
    assert detect_tailgating(make_traj(lidar=lidar), CFG) == [(20, 39)]


def test_forward_cone_ignores_rear_and_far_side():
    lidar = np.full((3, N_LIDAR), 50.0)
    lidar[0, 120] = 1.0  # straight behind
    lidar[1, 19] = 3.0  # 28.5 degrees off axis, 1.43 m lateral: inside the corridor
    lidar[2, 19] = 5.0  # same ray, 2.39 m lateral: neighbouring lane
    prox = forward_proximity(lidar, 60.0, 1.75)
    assert prox.tolist() == [50.0, 3.0, 50.0]
    assert forward_proximity(lidar, 60.0, None)[2] == 5.0


# --- aggregate ---------------------------------------------------------------------


def test_label_straight_trajectory_is_normal():
    r = label_trajectory(make_traj(), CFG)
    assert not r.is_anomalous and r.types == ()


def test_label_combines_detectors():
    t = np.arange(100) * 0.1
    speeds = np.concatenate([np.full(60, 15.0), 15.0 - 0.8 * np.arange(1, 11), np.full(30, 7.0)])
    angles = 0.15 * np.sin(2 * np.pi * t / 1.5) * (t < 5)
    r = label_trajectory(make_traj(states_from_speed_heading(speeds, angles)), CFG)
    assert {"Zigzag", "SuddenBraking"} <= set(r.types)
    assert r.is_anomalous == bool(r.types)


@settings(max_examples=25, deadline=None)
@given(dx=st.floats(-1e4, 1e4), dy=st.floats(-1e4, 1e4), seed=st.integers(0, 1000))
def test_detectors_translation_invariant(dx, dy, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(100) * 0.1
    angles = rng.uniform(0, 0.2) * np.sin(2 * np.pi * t / rng.uniform(1, 2))
    speeds = 10 + rng.uniform(-3, 3) * np.tanh(t - 5)
    states = states_from_speed_heading(speeds, angles)
    a = make_traj(states)
    moved = states.copy()
    moved[:, 0] += dx
    moved[:, 1] += dy
    b = make_traj(moved)
    for name, detect in DETECTORS.items():
        assert detect(a, CFG) == detect(b, CFG), name


@settings(max_examples=25, deadline=None)
@given(rot=st.floats(-np.pi, np.pi), seed=st.integers(0, 1000))
def test_curvature_and_dtheta_rotation_invariant(rot, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(100) * 0.1
    angles = rng.uniform(0, 0.3) * np.sin(2 * np.pi * t / rng.uniform(1, 2)) + rng.uniform(0, 0.01) * t
    h = np.stack([np.cos(angles), np.sin(angles)], 1)
    c, s = np.cos(rot), np.sin(rot)
    hr = h @ np.array([[c, s], [-s, c]])
    k, kr = curvature_series(h), curvature_series(hr)
    # k reaches the thousands where the turn rate nearly vanishes; compare relative there
    assert np.all(np.abs(k - kr) <= 1e-9 * np.maximum(1.0, k))
    assert np.max(np.abs(angular_change_series(h) - angular_change_series(hr))) < 1e-9
