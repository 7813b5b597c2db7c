"""Deterministic multi-agent highway episodes on a straight multi-lane road.

Agents follow a unicycle integrator driven by per-agent behaviour scripts. Normal
agents hold their lane exactly and follow the vehicle ahead with the
intelligent driver model; anomalous scripts inject zigzags, hard braking,
swerves, lane-line weaving or tailgating. Stored labels come from the rule
labeler run on the finished trajectories, not from the scripts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .core import ANOMALY_TYPES, AgentState, AgentTrajectory, Scenario, Vec2
from .labeler import LabelerConfig, label_trajectory
from .sensors import VEHICLE_LENGTH, VEHICLE_WIDTH, cast_all

NORMAL = "Normal"
BEHAVIORS = (NORMAL,) + ANOMALY_TYPES

SENSOR_DECIMALS = 2  # ray returns are quantised to centimetres
ROAD_START, ROAD_END = -200.0, 1000.0

# intelligent-driver-model constants for ordinary car following
IDM_ACCEL = 1.5
IDM_DECEL = 2.0
IDM_MIN_GAP = 3.0
IDM_HEADWAY = 1.5
NORMAL_ACCEL_RANGE = (-3.5, 2.0)
NORMAL_ACCEL_NOISE = 0.15
NORMAL_YAW_LIMIT = 0.05
RECOVERY_YAW_LIMIT = 0.3


@dataclass(frozen=True)
class GenConfig:
    n_agents: int = 6
    T: int = 100
    dt: float = 0.1
    n_lanes: int = 3
    lane_width: float = 3.5
    max_range: float = 50.0
    anomaly_fraction: float = 0.25
    anomaly_type_weights: Mapping[str, float] = field(
        default_factory=lambda: {k: 1.0 / len(ANOMALY_TYPES) for k in ANOMALY_TYPES}
    )
    seed: int = 0
    slot_spacing: float = 45.0
    speed_range: tuple[float, float] = (8.0, 15.0)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.T < 2 or self.dt <= 0 or self.n_lanes < 1 or self.lane_width <= 0:
            raise ValueError("T >= 2, dt > 0, n_lanes >= 1 and lane_width > 0 are required")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValueError("anomaly_fraction must lie in [0, 1]")
        unknown = set(self.anomaly_type_weights) - set(ANOMALY_TYPES)
        if unknown:
            raise ValueError(f"unknown anomaly types in weights: {sorted(unknown)}")
        if abs(sum(self.anomaly_type_weights.values()) - 1.0) > 1e-9:
            raise ValueError("anomaly_type_weights must sum to 1")

    def lane_centers(self) -> np.ndarray:
        return (np.arange(self.n_lanes) + 0.5) * self.lane_width

    def lane_lines(self) -> np.ndarray:
        """Interior lane-line offsets (excluding the road edges)."""
        return np.arange(1, self.n_lanes) * self.lane_width


@dataclass(frozen=True)
class BehaviorScript:
    kind: str
    onset: int = 0
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BEHAVIORS:
            raise ValueError(f"unknown behaviour {self.kind!r}")
        if self.onset < 0:
            raise ValueError("onset must be nonnegative")

    @property
    def anomalous(self) -> bool:
        return self.kind != NORMAL


class Context(NamedTuple):
    """What a controller may observe about the world at one step."""

    state: AgentState
    dt: float
    lane_y: float  # centre of the agent's current target lane
    lead_gap: float  # centre-to-centre distance to the vehicle ahead (inf if none)
    lead_speed: float
    desired_speed: float


# --- kinematics --------------------------------------------------------------


def step_unicycle(state: AgentState, accel: float, yaw_rate: float, dt: float) -> AgentState:
    """Advance one step: clamp speed at zero, rotate the heading, then move."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    speed = max(0.0, state.speed + accel * dt)
    ang = yaw_rate * dt
    c, s = math.cos(ang), math.sin(ang)
    hx, hy = state.heading
    hx, hy = hx * c - hy * s, hx * s + hy * c
    n = math.hypot(hx, hy)
    hx, hy = hx / n, hy / n
    vx, vy = speed * hx, speed * hy
    px, py = state.position
    return AgentState(Vec2(px + vx * dt, py + vy * dt), Vec2(vx, vy), Vec2(hx, hy))


def _clip(x: float, lo: float, hi: float) -> float:
    return float(min(max(x, lo), hi))


def _heading_angle(state: AgentState) -> float:
    return math.atan2(state.heading.y, state.heading.x)


def idm_accel(speed: float, desired: float, gap: float, lead_speed: float) -> float:
    free = 1.0 - (speed / max(desired, 0.1)) ** 4
    if not math.isfinite(gap):
        return IDM_ACCEL * free
    bumper = max(gap - VEHICLE_LENGTH, 0.1)
    s_star = IDM_MIN_GAP + speed * IDM_HEADWAY + speed * (speed - lead_speed) / (2 * math.sqrt(IDM_ACCEL * IDM_DECEL))
    return IDM_ACCEL * (free - (max(s_star, 0.0) / bumper) ** 2)


def _normal_longitudinal(ctx: Context, rng) -> float:
    a = idm_accel(ctx.state.speed, ctx.desired_speed, ctx.lead_gap, ctx.lead_speed)
    a += NORMAL_ACCEL_NOISE * rng.standard_normal()
    return _clip(a, *NORMAL_ACCEL_RANGE)


def _track_lateral(ctx: Context, y_ref: float, y_ref_rate: float, limit: float, k_y=0.8, k_psi=3.0) -> float:
    """Yaw rate steering toward a lateral reference; exactly zero when on it."""
    st = ctx.state
    err = y_ref - st.position.y
    psi_des = math.atan2(k_y * err + y_ref_rate, max(st.speed, 1.0))
    yaw = k_psi * (psi_des - _heading_angle(st))
    return _clip(yaw, -limit, limit)


# --- behaviour scripts ---------------------------------------------------------


def make_script(kind: str, config: GenConfig, rng, lane: int) -> BehaviorScript:
    """Draw kind-specific parameters for an agent starting in ``lane``."""
    T, dt = config.T, config.dt
    if kind == NORMAL:
        return BehaviorScript(NORMAL)
    if kind == "Zigzag":
        period = rng.uniform(1.2, 1.8)
        cycles = int(rng.integers(2, 4))
        duration = int(round(cycles * period / dt))
        onset = int(rng.integers(15, max(16, T - 25 - duration)))
        return BehaviorScript(kind, onset, {"amplitude": rng.uniform(0.08, 0.15), "period": period,
                                            "duration": duration})
    if kind == "SuddenBraking":
        onset = int(rng.integers(15, max(16, T - 25)))
        return BehaviorScript(kind, onset, {"decel": rng.uniform(7.0, 9.0), "duration": int(round(1.0 / dt))})
    if kind == "SuddenTurn":
        onset = int(rng.integers(15, max(16, T - 30)))
        options = [d for d in (-1, 1) if 0 <= lane + d < config.n_lanes] or [1]
        direction = options[int(rng.integers(len(options)))]
        return BehaviorScript(kind, onset, {"direction": float(direction), "pulse": 3, "hold": 6,
                                            "margin": rng.uniform(1.4, 1.8)})
    if kind == "LaneWeaving":
        onset = int(rng.integers(5, max(6, T - 75)))
        lines = [i for i in (lane, lane + 1) if 1 <= i <= config.n_lanes - 1] or [1]
        line = lines[int(rng.integers(len(lines)))]
        return BehaviorScript(kind, onset, {"line": float(line * config.lane_width),
                                            "amplitude": rng.uniform(0.5, 0.8),
                                            "period": rng.uniform(2.0, 2.5),
                                            "approach": int(round(1.5 / dt)),
                                            "duration": int(round(5.5 / dt))})
    if kind == "Tailgating":
        onset = int(rng.integers(0, max(1, min(20, T // 5))))
        return BehaviorScript(kind, onset, {"gap": rng.uniform(1.0, 2.0)})
    raise ValueError(f"unknown behaviour {kind!r}")


def script_controls(script: BehaviorScript, t: int, rng, ctx: Context) -> tuple[float, float]:
    """Acceleration (m/s^2) and yaw rate (rad/s) for ``script`` at step ``t``."""
    p = script.params
    tau = t - script.onset
    dt = ctx.dt

    if script.kind == "Zigzag" and 0 <= tau < p["duration"]:
        omega = 2 * math.pi / p["period"]
        return _normal_longitudinal(ctx, rng), p["amplitude"] * omega * math.cos(omega * tau * dt)

    if script.kind == "SuddenBraking" and 0 <= tau < p["duration"]:
        return -p["decel"], _track_lateral(ctx, ctx.lane_y, 0.0, NORMAL_YAW_LIMIT)

    if script.kind == "SuddenTurn":
        pulse, hold = int(p["pulse"]), int(p["hold"])
        if 0 <= tau < 2 * pulse + hold:
            if pulse <= tau < pulse + hold:
                return 0.0, 0.0
            sign = p["direction"] if tau < pulse else -p["direction"]
            v_next = max(ctx.state.speed, 1.0)
            # Δθ per frame times next-frame speed must clear the turn threshold
            yaw = sign * p["margin"] * 0.8 / (dt * v_next)
            return 0.0, _clip(yaw, -6.0, 6.0)

    if script.kind == "LaneWeaving":
        approach, duration = int(p["approach"]), int(p["duration"])
        y0, line = ctx.lane_y, p["line"]
        if 0 <= tau < 2 * approach + duration:
            omega = 2 * math.pi / p["period"]
            if tau < approach:
                frac = 0.5 - 0.5 * math.cos(math.pi * tau / approach)
                rate = 0.5 * math.pi / (approach * dt) * math.sin(math.pi * tau / approach)
                y_ref, y_rate = y0 + (line - y0) * frac, (line - y0) * rate
            elif tau < approach + duration:
                s = (tau - approach) * dt
                y_ref = line + p["amplitude"] * math.sin(omega * s)
                y_rate = p["amplitude"] * omega * math.cos(omega * s)
            else:
                s = tau - approach - duration
                frac = 0.5 - 0.5 * math.cos(math.pi * s / approach)
                rate = 0.5 * math.pi / (approach * dt) * math.sin(math.pi * s / approach)
                y_ref, y_rate = line + (y0 - line) * frac, (y0 - line) * rate
            return _normal_longitudinal(ctx, rng), _track_lateral(ctx, y_ref, y_rate, 1.2, k_y=1.5, k_psi=5.0)

    if script.kind == "Tailgating" and tau >= 0 and math.isfinite(ctx.lead_gap):
        bumper = ctx.lead_gap - VEHICLE_LENGTH
        a = 0.5 * (bumper - p["gap"]) + 1.2 * (ctx.lead_speed - ctx.state.speed)
        return _clip(a, -6.0, 3.5), _track_lateral(ctx, ctx.lane_y, 0.0, NORMAL_YAW_LIMIT)

    limit = NORMAL_YAW_LIMIT if script.kind == NORMAL else RECOVERY_YAW_LIMIT
    return _normal_longitudinal(ctx, rng), _track_lateral(ctx, ctx.lane_y, 0.0, limit)


# --- scene assembly ------------------------------------------------------------


def road_polylines(config: GenConfig) -> tuple[np.ndarray, ...]:
    offsets = np.arange(config.n_lanes + 1) * config.lane_width
    return tuple(np.array([[ROAD_START, y], [ROAD_END, y]]) for y in offsets)


def _draw_scripts(config: GenConfig, rng) -> list[str]:
    kinds = list(config.anomaly_type_weights)
    probs = np.array([config.anomaly_type_weights[k] for k in kinds], dtype=float)
    out = []
    for _ in range(config.n_agents):
        if rng.random() < config.anomaly_fraction:
            out.append(kinds[int(rng.choice(len(kinds), p=probs))])
        else:
            out.append(NORMAL)
    return out


def _spawn(config: GenConfig, kinds: list[str], rng):
    """Lane/slot layout: agent i drives lane ``i % n_lanes`` at slot ``i // n_lanes``.

    Tailgaters are moved to slots with a vehicle ahead in the same lane and start
    close behind it. Returns per-agent (lane, x, speed) and the final kinds.
    """
    n, L = config.n_agents, config.n_lanes
    lanes = [i % L for i in range(n)]
    slots = [i // L for i in range(n)]
    has_lead = [any(lanes[j] == lanes[i] and slots[j] == slots[i] + 1 for j in range(n)) for i in range(n)]
    kinds = list(kinds)
    # swap tailgaters into rear slots; surplus ones fall back to another anomaly
    for i in range(n):
        if kinds[i] == "Tailgating" and not has_lead[i]:
            swap = next((j for j in range(n) if has_lead[j] and kinds[j] != "Tailgating"), None)
            if swap is not None:
                kinds[i], kinds[swap] = kinds[swap], kinds[i]
    others = [k for k in ANOMALY_TYPES if k != "Tailgating" and config.anomaly_type_weights.get(k, 0) > 0]
    for i in range(n):
        if kinds[i] == "Tailgating" and not has_lead[i]:
            kinds[i] = others[int(rng.integers(len(others)))] if others else NORMAL

    x = [slots[i] * config.slot_spacing + lanes[i] * config.slot_spacing / L + rng.uniform(-4.0, 4.0)
         for i in range(n)]
    speed = [rng.uniform(*config.speed_range) for _ in range(n)]
    for i in range(n):
        if kinds[i] == "Tailgating":
            lead = next(j for j in range(n) if lanes[j] == lanes[i] and slots[j] == slots[i] + 1)
            x[i] = x[lead] - rng.uniform(14.0, 20.0)
    return lanes, x, speed, kinds


def _find_lead(i: int, states: list[AgentState]) -> tuple[float, float]:
    me = states[i]
    hx, hy = me.heading
    best, best_speed = math.inf, 0.0
    for j, other in enumerate(states):
        if j == i:
            continue
        dx = other.position.x - me.position.x
        dy = other.position.y - me.position.y
        ahead = dx * hx + dy * hy
        lateral = abs(-dx * hy + dy * hx)
        if ahead > 0 and lateral < VEHICLE_WIDTH + 0.5 and ahead < best:
            best, best_speed = ahead, other.speed
    return best, best_speed


def lane_crossing(states: np.ndarray, lane_lines: np.ndarray) -> np.ndarray:
    """True while the vehicle footprint overlaps an interior lane line."""
    if len(lane_lines) == 0:
        return np.zeros(len(states), dtype=bool)
    y = states[:, 1]
    hx, hy = np.abs(states[:, 4]), np.abs(states[:, 5])
    half_extent = 0.5 * VEHICLE_WIDTH * hx + 0.5 * VEHICLE_LENGTH * hy
    dist = np.min(np.abs(y[:, None] - lane_lines[None, :]), axis=1)
    return dist < half_extent


def generate_episode(config: GenConfig, scenario_seed: int, labeler: LabelerConfig | None = None):
    """Simulate one episode; returns ``(Scenario, scripts)``."""
    rng = np.random.default_rng([config.seed, scenario_seed])
    kinds = _draw_scripts(config, rng)
    lanes, x0, v0, kinds = _spawn(config, kinds, rng)
    centers = config.lane_centers()
    scripts = [make_script(k, config, rng, lanes[i]) for i, k in enumerate(kinds)]

    n, T, dt = config.n_agents, config.T, config.dt
    # (lane before, lane after, step of switch); a swerve settles in the neighbouring lane
    lane_plan = []
    for i, sc in enumerate(scripts):
        y0 = float(centers[lanes[i]])
        if sc.kind == "SuddenTurn":
            j = int(np.clip(lanes[i] + int(sc.params["direction"]), 0, config.n_lanes - 1))
            switch = sc.onset + 2 * int(sc.params["pulse"]) + int(sc.params["hold"])
            lane_plan.append((y0, float(centers[j]), switch))
        else:
            lane_plan.append((y0, y0, T))
    states = [AgentState(Vec2(x0[i], float(centers[lanes[i]])), Vec2(v0[i], 0.0), Vec2(1.0, 0.0)) for i in range(n)]
    series = np.zeros((T, n, 6))
    series[0] = [s.as_row() for s in states]
    agent_rngs = [np.random.default_rng([config.seed, scenario_seed, i]) for i in range(n)]
    for t in range(T - 1):
        nxt = []
        for i, sc in enumerate(scripts):
            gap, lead_v = _find_lead(i, states)
            before, after, switch = lane_plan[i]
            lane_y = after if t >= switch else before
            ctx = Context(states[i], dt, lane_y, gap, lead_v, v0[i])
            a, w = script_controls(sc, t, agent_rngs[i], ctx)
            nxt.append(step_unicycle(states[i], a, w, dt))
        states = nxt
        series[t + 1] = [s.as_row() for s in states]

    road = road_polylines(config)
    lidar, lane, side = cast_all(series[:, :, 0:2], series[:, :, 4:6], road, config.max_range)
    lidar, lane, side = (np.round(a, SENSOR_DECIMALS) for a in (lidar, lane, side))
    lines = config.lane_lines()
    labeler = labeler or LabelerConfig(dt=dt)
    agents = []
    for i in range(n):
        traj = AgentTrajectory(
            agent_id=f"a{i}",
            states=series[:, i, :].copy(),
            lidar=lidar[:, i, :].copy(),
            lane=lane[:, i, :].copy(),
            side=side[:, i, :].copy(),
            lane_cross=lane_crossing(series[:, i, :], lines),
        )
        agents.append(traj.with_label(label_trajectory(traj, labeler)))
    sid = f"s{config.seed}-{scenario_seed:06d}"
    return Scenario(sid, dt, tuple(agents), road), scripts


def simulate_scenario(config: GenConfig, scenario_seed: int) -> Scenario:
    return generate_episode(config, scenario_seed)[0]


def generate_scenarios(config: GenConfig, count: int):
    for k in range(count):
        yield simulate_scenario(config, k)
