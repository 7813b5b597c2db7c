"""Training and evaluation over (scenario, ego) samples.

Every agent of a scenario yields one sample: the whole scene is the input
graph and that agent is the ego whose label is predicted. Sensor returns are
cached once per scenario (as integer centimetres when the data is stored at
1 cm resolution, which is exact) and shared by that scenario's samples.
"""
from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .blackout import make_mask
from .core import DatasetSplit, Scenario, iter_dataset
from .metrics import MetricsReport, report
from .temporal import Model, ModelConfig, bce_loss, forward_features, scenario_sensors

EVAL_SCENES = 4  # scenes per inference batch


class UnlabeledDataError(ValueError):
    pass


@dataclass(frozen=True)
class BlackoutSpec:
    mode: str  # "random" or "sequential"
    pct: float  # fraction of non-ego slots, in [0, 1]
    max_block: int = 10
    seed: int = 0

    def mask_for(self, scenario_id: str, ego: int, n_agents: int, T: int, agent_id: str):
        # seeded by sample identity, so a sample gets the same mask in any order
        key = zlib.crc32(f"{scenario_id}\x00{agent_id}".encode())
        return make_mask(self.mode, n_agents, T, ego, self.pct, self.max_block, seed=[self.seed, key])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    pos_weight: float = 3.0
    seed: int = 0
    patience: int = 5
    train_blackout: BlackoutSpec | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if not (self.lr > 0 and self.pos_weight > 0):
            raise ValueError("lr and pos_weight must be positive")


class SampleSet:
    """Scenarios plus the (scene, ego) samples drawn from them."""

    def __init__(self):
        self.scenario_ids: list[str] = []
        self.agent_ids: list[list[str]] = []
        self._sensors: list[np.ndarray] = []
        self._scales: list[float] = []
        self.scene: list[int] = []
        self.ego: list[int] = []
        self.labels: list[int] = []
        self.T: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def keys(self) -> list[tuple[str, str]]:
        return [(self.scenario_ids[s], self.agent_ids[s][e]) for s, e in zip(self.scene, self.ego)]

    def add(self, scenario: Scenario, egos: Iterable[str]) -> None:
        egos = list(egos)
        if not egos:
            return
        if self.T is None:
            self.T = scenario.T
        elif scenario.T != self.T:
            raise ValueError(f"scenario {scenario.scenario_id} has T={scenario.T}, expected {self.T}")
        unlabeled = [aid for aid in egos if scenario.agents[scenario.agent_index(aid)].label is None]
        if unlabeled:
            raise UnlabeledDataError(
                f"scenario {scenario.scenario_id} agent {unlabeled[0]} has no label; run `cpad label` first"
            )
        sensors = scenario_sensors(scenario)
        cm = np.round(sensors * 100.0)
        if np.abs(cm).max(initial=0) < 2**15 and np.array_equal(cm / 100.0, sensors):
            self._sensors.append(cm.astype(np.int16))
            self._scales.append(100.0)
        else:
            self._sensors.append(sensors)
            self._scales.append(1.0)
        idx = len(self.scenario_ids)
        self.scenario_ids.append(scenario.scenario_id)
        self.agent_ids.append([a.agent_id for a in scenario.agents])
        for aid in egos:
            e = scenario.agent_index(aid)
            self.scene.append(idx)
            self.ego.append(e)
            self.labels.append(int(scenario.agents[e].label.is_anomalous))

    def sensors(self, scene: int) -> np.ndarray:
        s = self._sensors[scene]
        return s / self._scales[scene] if self._scales[scene] != 1.0 else s

    def batch(self, indices: Sequence[int], blackout: BlackoutSpec | None = None):
        """Model inputs for the given samples: sensors, scene index, ego index, presence."""
        scenes = sorted({self.scene[i] for i in indices})
        pos = {s: j for j, s in enumerate(scenes)}
        N = max(len(self.agent_ids[s]) for s in scenes)
        stack = np.zeros((len(scenes), self.T, N, self._sensors[scenes[0]].shape[-1]))
        for j, s in enumerate(scenes):
            stack[j, :, : len(self.agent_ids[s])] = self.sensors(s)
        scene_index = np.array([pos[self.scene[i]] for i in indices])
        ego = np.array([self.ego[i] for i in indices])
        # agents beyond a scene's own count are padding and are simply absent
        present = np.zeros((len(indices), self.T, N), dtype=bool)
        for b, i in enumerate(indices):
            s = self.scene[i]
            n = len(self.agent_ids[s])
            present[b, :, :n] = True
            if blackout is not None and blackout.pct > 0:
                mask = blackout.mask_for(self.scenario_ids[s], self.ego[i], n, self.T, self.agent_ids[s][self.ego[i]])
                present[b, :, :n] &= mask.present
        return stack, scene_index, ego, present

    @classmethod
    def from_scenarios(cls, scenarios: Iterable[Scenario], pairs=None) -> "SampleSet":
        """Samples for ``pairs`` ((scenario_id, agent_id)) or for every agent of every scenario."""
        if pairs is None:
            out = cls()
            for sc in scenarios:
                out.add(sc, [a.agent_id for a in sc.agents])
            return out
        return collect(scenarios, {"set": pairs})["set"]


def collect(scenarios: Iterable[Scenario], segments: dict[str, Sequence[tuple[str, str]]]) -> dict[str, SampleSet]:
    """One pass over ``scenarios`` filling a SampleSet per named list of (scenario_id, agent_id).

    Samples follow the order of the scenario stream; scenarios nobody asks for
    are skipped without being kept.
    """
    wanted: dict[str, dict[str, list[str]]] = {}
    for name, pairs in segments.items():
        for sid, aid in pairs:
            wanted.setdefault(sid, {}).setdefault(name, []).append(aid)
    out = {name: SampleSet() for name in segments}
    seen = set()
    for sc in scenarios:
        asks = wanted.get(sc.scenario_id)
        if asks is None:
            continue
        seen.add(sc.scenario_id)
        for name, aids in asks.items():
            out[name].add(sc, aids)
    missing = sorted(set(wanted) - seen)
    if missing:
        raise ValueError(f"split names scenario {missing[0]!r} which the dataset lacks")
    return out


def load_samples(path, pairs) -> SampleSet:
    """Stream a JSONL dataset keeping only the scenarios named in ``pairs``."""
    return collect(iter_dataset(path), {"set": pairs})["set"]


def predict(model: Model, samples: SampleSet, blackout: BlackoutSpec | None = None,
            scenes_per_batch: int = EVAL_SCENES) -> np.ndarray:
    """Anomaly probabilities for every sample, batched by scene."""
    by_scene: dict[int, list[int]] = {}
    for i, s in enumerate(samples.scene):
        by_scene.setdefault(s, []).append(i)
    groups = list(by_scene.values())
    probs = np.empty(len(samples))
    with ad.no_grad():
        for lo in range(0, len(groups), scenes_per_batch):
            idx = [i for g in groups[lo:lo + scenes_per_batch] for i in g]
            stack, scene_index, ego, present = samples.batch(idx, blackout)
            probs[idx] = forward_features(model, stack, ego, present, scene_index).data
    return probs


@dataclass
class EvalResult:
    report: MetricsReport
    keys: list[tuple[str, str]]
    labels: np.ndarray
    probs: np.ndarray

    def write_probabilities(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", "agent_id", "label", "prob"])
            for (sid, aid), y, p in zip(self.keys, self.labels, self.probs):
                w.writerow([sid, aid, int(y), repr(float(p))])


def evaluate(model: Model, samples: SampleSet, blackout: BlackoutSpec | None = None) -> EvalResult:
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    probs = predict(model, samples, blackout)
    labels = np.array(samples.labels)
    return EvalResult(report(labels, probs), samples.keys, labels, probs)


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0
    scenarios_read: set[str] = field(default_factory=set)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_f1"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_f1"])])


def train_samples(train_set: SampleSet, val_set: SampleSet, config: TrainConfig = TrainConfig(),
                  model_config: ModelConfig = ModelConfig(),
                  progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam on BCE, early-stopped on validation F1; returns the best checkpoint."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.T > model_config.t_max:
        raise ValueError(f"trajectories of {train_set.T} steps exceed the model's t_max={model_config.t_max}")
    model_config = ModelConfig(**{**model_config.__dict__, "seed": config.seed})
    model = Model(model_config)
    rng = np.random.default_rng([config.seed, 1])
    state = ad.AdamState()
    labels = np.array(train_set.labels, dtype=float)
    best = (-1.0, 0, model.arrays())
    log = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = [int(i) for i in order[lo:lo + config.batch_size]]
            stack, scene_index, ego, present = train_set.batch(idx, config.train_blackout)
            model.zero_grad()
            probs = forward_features(model, stack, ego, present, scene_index)
            loss = bce_loss(probs, labels[idx], config.pos_weight)
            loss.backward()
            total += float(loss.data) * len(idx)
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            model.load_arrays(ad.adam_step(model.arrays(), grads, state, config.lr))
        val_f1 = evaluate(model, val_set).report.f1 if len(val_set) else 0.0
        row = {"epoch": epoch, "train_loss": total / len(order), "val_f1": val_f1}
        log.append(row)
        if progress is not None:
            progress(row)
        if val_f1 > best[0]:
            best = (val_f1, epoch, {k: v.copy() for k, v in model.arrays().items()})
        elif epoch - best[1] >= config.patience:
            break
    model.load_arrays(best[2])
    read = set(train_set.scenario_ids) | set(val_set.scenario_ids)
    return TrainResult(model, log, best[1], best[0], read)


def train(dataset_path, split: DatasetSplit, config: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(), progress=None) -> TrainResult:
    """Train on the split's train segment, early-stopping on its val segment.

    Test-segment scenarios are never loaded.
    """
    sets = collect(iter_dataset(dataset_path), {"train": split.train, "val": split.val})
    return train_samples(sets["train"], sets["val"], config, model_config, progress)


def write_report(result: EvalResult, path) -> None:
    Path(path).write_text(result.report.to_json() + "\n")


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
