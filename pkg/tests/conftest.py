from __future__ import annotations

import numpy as np
import pytest

from cpad.core import N_LANE, N_LIDAR, N_SIDE, AgentTrajectory, Scenario
from cpad.generator import GenConfig, simulate_scenario


def straight_states(T: int = 100, speed: float = 10.0, dt: float = 0.1, y: float = 1.75,
                    heading=(1.0, 0.0)) -> np.ndarray:
    h = np.asarray(heading, dtype=float)
    h = h / np.linalg.norm(h)
    t = np.arange(T)[:, None] * dt
    pos = np.array([0.0, y]) + t * speed * h
    vel = np.tile(speed * h, (T, 1))
    return np.hstack([pos, vel, np.tile(h, (T, 1))])


def make_traj(states=None, agent_id: str = "a0", lidar=None, lane_cross=None, label=None,
              max_range: float = 50.0) -> AgentTrajectory:
    states = straight_states() if states is None else np.asarray(states, dtype=float)
    T = len(states)
    lidar = np.full((T, N_LIDAR), max_range) if lidar is None else np.asarray(lidar, dtype=float)
    lane_cross = np.zeros(T, dtype=bool) if lane_cross is None else np.asarray(lane_cross, dtype=bool)
    return AgentTrajectory(agent_id, states, lidar, np.full((T, N_LANE), max_range),
                           np.full((T, N_SIDE), 1.75), lane_cross, label)


def states_from_speed_heading(speeds, angles, dt: float = 0.1) -> np.ndarray:
    """Integrate a speed/heading-angle series into state rows."""
    speeds = np.asarray(speeds, dtype=float)
    angles = np.asarray(angles, dtype=float)
    h = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    v = speeds[:, None] * h
    pos = np.vstack([[0.0, 0.0], np.cumsum(v[:-1] * dt, axis=0)])
    return np.hstack([pos, v, h])


@pytest.fixture(scope="session")
def small_scenarios() -> list[Scenario]:
    cfg = GenConfig(n_agents=4, seed=3)
    return [simulate_scenario(cfg, k) for k in range(6)]
