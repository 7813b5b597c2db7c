"""Domain types shared across the package, plus JSONL dataset I/O and splitting.

A trajectory stores its series as numpy arrays rather than lists of per-step
objects:

* ``states``: ``(T, 6)`` rows of ``px, py, vx, vy, hx, hy``
* ``lidar``: ``(T, 240)``, ``lane``: ``(T, 12)``, ``side``: ``(T, 12)``
* ``lane_cross``: ``(T,)`` booleans

``Scenario.lanes`` lists lane-boundary polylines ordered across the road; the
first and last entries are the road edges, the ones between are lane lines.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

N_LIDAR = 240
N_LANE = 12
N_SIDE = 12
SENSOR_DIM = N_LIDAR + N_LANE + N_SIDE

ANOMALY_TYPES = ("Zigzag", "SuddenBraking", "SuddenTurn", "LaneWeaving", "Tailgating")


class SchemaError(ValueError):
    """A dataset record violates the scenario schema."""


class Vec2(NamedTuple):
    x: float
    y: float

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


class AgentState(NamedTuple):
    position: Vec2
    velocity: Vec2
    heading: Vec2

    @property
    def speed(self) -> float:
        return self.velocity.norm()

    def as_row(self) -> list[float]:
        return [*self.position, *self.velocity, *self.heading]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> AgentState:
        return cls(Vec2(row[0], row[1]), Vec2(row[2], row[3]), Vec2(row[4], row[5]))


@dataclass(frozen=True)
class SensorFrame:
    lidar: np.ndarray
    lane: np.ndarray
    side: np.ndarray

    def __post_init__(self):
        for name, n in (("lidar", N_LIDAR), ("lane", N_LANE), ("side", N_SIDE)):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise SchemaError(f"{name} frame must have {n} rays, got {arr.shape}")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.lidar, self.lane, self.side])


@dataclass(frozen=True)
class AnomalyReport:
    is_anomalous: bool
    types: tuple[str, ...] = ()
    intervals: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.is_anomalous != bool(self.types):
            raise SchemaError("is_anomalous must hold exactly when types is nonempty")
        unknown = set(self.types) - set(ANOMALY_TYPES)
        if unknown:
            raise SchemaError(f"unknown anomaly types {sorted(unknown)}")

    def to_json(self) -> dict:
        return {
            "anomalous": self.is_anomalous,
            "types": list(self.types),
            "intervals": {k: [[int(s), int(e)] for s, e in v] for k, v in self.intervals.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> AnomalyReport:
        intervals = {k: [(int(s), int(e)) for s, e in v] for k, v in obj["intervals"].items()}
        return cls(bool(obj["anomalous"]), tuple(obj["types"]), intervals)


@dataclass(frozen=True, eq=False)
class AgentTrajectory:
    agent_id: str
    states: np.ndarray
    lidar: np.ndarray
    lane: np.ndarray
    side: np.ndarray
    lane_cross: np.ndarray
    label: AnomalyReport | None = None

    def __post_init__(self):
        T = len(self.states)
        if T < 2:
            raise SchemaError(f"agent {self.agent_id}: need at least 2 steps, got {T}")
        expected = {
            "states": (T, 6),
            "lidar": (T, N_LIDAR),
            "lane": (T, N_LANE),
            "side": (T, N_SIDE),
            "lane_cross": (T,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise SchemaError(f"agent {self.agent_id}: {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(self.states)):
            raise SchemaError(f"agent {self.agent_id}: non-finite state values")
        if self.label is not None:
            for spans in self.label.intervals.values():
                for s, e in spans:
                    if not (0 <= s <= e < T):
                        raise SchemaError(f"agent {self.agent_id}: interval {[s, e]} outside [0, {T})")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:2]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 2:4]

    @property
    def headings(self) -> np.ndarray:
        return self.states[:, 4:6]

    @property
    def speeds(self) -> np.ndarray:
        return np.hypot(self.states[:, 2], self.states[:, 3])

    def state(self, t: int) -> AgentState:
        return AgentState.from_row(self.states[t])

    def frame(self, t: int) -> SensorFrame:
        return SensorFrame(self.lidar[t], self.lane[t], self.side[t])

    def sensor_matrix(self) -> np.ndarray:
        """``(T, 264)`` concatenation of lidar, lane and side rays."""
        return np.concatenate([self.lidar, self.lane, self.side], axis=1)

    def with_label(self, label: AnomalyReport | None) -> AgentTrajectory:
        return AgentTrajectory(self.agent_id, self.states, self.lidar, self.lane, self.side, self.lane_cross, label)

    def __eq__(self, other):
        if not isinstance(other, AgentTrajectory):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.label == other.label
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("states", "lidar", "lane", "side", "lane_cross")
            )
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    dt: float
    agents: tuple[AgentTrajectory, ...]
    lanes: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise SchemaError(f"scenario {self.scenario_id}: dt must be positive")
        if not self.agents:
            raise SchemaError(f"scenario {self.scenario_id}: no agents")
        lengths = {len(a) for a in self.agents}
        if len(lengths) != 1:
            raise SchemaError(f"scenario {self.scenario_id}: agents have differing lengths {sorted(lengths)}")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"scenario {self.scenario_id}: duplicate agent ids")

    @property
    def T(self) -> int:
        return len(self.agents[0])

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def agent_index(self, agent_id: str) -> int:
        for i, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return i
        raise KeyError(f"scenario {self.scenario_id} has no agent {agent_id!r}")

    def is_labeled(self) -> bool:
        return all(a.label is not None for a in self.agents)

    def without_agent(self, agent_id: str) -> Scenario:
        kept = tuple(a for a in self.agents if a.agent_id != agent_id)
        return Scenario(self.scenario_id, self.dt, kept, self.lanes)

    def with_agents(self, agents: Iterable[AgentTrajectory]) -> Scenario:
        return Scenario(self.scenario_id, self.dt, tuple(agents), self.lanes)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.dt == other.dt
            and self.agents == other.agents
            and len(self.lanes) == len(other.lanes)
            and all(np.array_equal(a, b) for a, b in zip(self.lanes, other.lanes))
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[tuple[str, str], ...]
    val: tuple[tuple[str, str], ...]
    test: tuple[tuple[str, str], ...]

    def segment(self, name: str) -> tuple[tuple[str, str], ...]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split segment {name!r}")
        return getattr(self, name)

    def scenario_ids(self, name: str) -> list[str]:
        return sorted({sid for sid, _ in self.segment(name)})

    def to_json(self) -> dict:
        return {k: [list(p) for p in getattr(self, k)] for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, obj: dict) -> DatasetSplit:
        return cls(*(tuple((s, a) for s, a in obj[k]) for k in ("train", "val", "test")))


# --- serialization ---------------------------------------------------------


def _floats(arr: np.ndarray) -> list:
    # tolist() yields Python floats, whose repr round-trips exactly
    return arr.tolist()


def scenario_to_json(sc: Scenario) -> dict:
    return {
        "scenario_id": sc.scenario_id,
        "dt": float(sc.dt),
        "lanes": [_floats(np.asarray(p, dtype=float)) for p in sc.lanes],
        "agents": [
            {
                "agent_id": a.agent_id,
                "states": _floats(a.states),
                "lidar": _floats(a.lidar),
                "lane": _floats(a.lane),
                "side": _floats(a.side),
                "lane_cross": [bool(b) for b in a.lane_cross],
                "label": None if a.label is None else a.label.to_json(),
            }
            for a in sc.agents
        ],
    }


def _array(obj, width: int | None, what: str) -> np.ndarray:
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{what}: not a numeric array ({exc})") from None
    if width is not None and (arr.ndim != 2 or arr.shape[1] != width):
        raise SchemaError(f"{what}: expected rows of {width} values, got shape {arr.shape}")
    return arr


def scenario_from_json(obj: dict) -> Scenario:
    try:
        agents = []
        for a in obj["agents"]:
            aid = str(a["agent_id"])
            label = None if a["label"] is None else AnomalyReport.from_json(a["label"])
            agents.append(
                AgentTrajectory(
                    agent_id=aid,
                    states=_array(a["states"], 6, f"agent {aid} states"),
                    lidar=_array(a["lidar"], N_LIDAR, f"agent {aid} lidar"),
                    lane=_array(a["lane"], N_LANE, f"agent {aid} lane"),
                    side=_array(a["side"], N_SIDE, f"agent {aid} side"),
                    lane_cross=np.asarray(a["lane_cross"], dtype=bool),
                    label=label,
                )
            )
        lanes = tuple(_array(p, 2, "lane polyline") for p in obj["lanes"])
        return Scenario(str(obj["scenario_id"]), float(obj["dt"]), tuple(agents), lanes)
    except KeyError as exc:
        raise SchemaError(f"missing field {exc}") from None


def write_dataset(scenarios: Iterable[Scenario], path: str | Path) -> int:
    """Write one JSON object per scenario per line. Returns the number of lines."""
    count = 0
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for sc in scenarios:
                fh.write(json.dumps(scenario_to_json(sc), separators=(",", ":")))
                fh.write("\n")
                count += 1
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror or exc}") from exc
    return count


def iter_dataset(path: str | Path) -> Iterator[Scenario]:
    """Stream scenarios from a JSONL file; errors carry the 1-based line number."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                yield scenario_from_json(obj)
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None


def read_dataset(path: str | Path) -> list[Scenario]:
    return list(iter_dataset(path))


def make_split(
    scenarios: Sequence[Scenario] | Sequence[tuple[str, Sequence[str]]],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle scenarios with ``seed`` and cut them into train/val/test.

    Val and test sizes are floored; train takes the remainder. Every agent of a
    scenario lands in the same segment. ``scenarios`` may be Scenario objects or
    ``(scenario_id, agent_ids)`` pairs.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    entries = [
        (s.scenario_id, [a.agent_id for a in s.agents]) if isinstance(s, Scenario) else (s[0], list(s[1]))
        for s in scenarios
    ]
    n = len(entries)
    nonzero = sum(1 for f in fractions if f > 0)
    if n < nonzero:
        raise ValueError(f"{n} scenarios cannot fill {nonzero} nonempty split buckets")
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    buckets = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])

    def pairs(idx):
        return tuple((entries[i][0], aid) for i in sorted(idx, key=lambda j: entries[j][0]) for aid in entries[i][1])

    return DatasetSplit(*(pairs(b) for b in buckets))
