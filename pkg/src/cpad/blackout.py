"""Communication blackout masks over (agent, timestep) slots.

A mask grid is ``(n_agents, T)`` booleans with True meaning the agent's
communicated perception is lost at that step. The ego row is never masked.
Masked agents are removed from the graph at those steps rather than
zero-filled, so a fully masked agent behaves exactly like a deleted one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Scenario

RANDOM = "RandomStepwise"
SEQUENTIAL = "Sequential"
MODES = (RANDOM, SEQUENTIAL)


@dataclass(frozen=True, eq=False)
class BlackoutMask:
    grid: np.ndarray
    mode: str
    percentage: float
    seed: object
    ego_index: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {grid.shape}")
        if not 0 <= self.ego_index < grid.shape[0]:
            raise ValueError(f"ego index {self.ego_index} outside {grid.shape[0]} agents")
        if grid[self.ego_index].any():
            raise ValueError("blackout mask covers the ego agent")
        if self.mode not in MODES:
            raise ValueError(f"unknown blackout mode {self.mode!r}")
        object.__setattr__(self, "grid", grid)

    @property
    def masked_slots(self) -> int:
        return int(self.grid.sum())

    @property
    def present(self) -> np.ndarray:
        """``(T, n_agents)`` presence matrix as consumed by the model."""
        return ~self.grid.T


def slot_budget(n_agents: int, T: int, pct: float) -> int:
    # floor(x + 0.5): rounds halves up instead of to even
    return int(np.floor(pct * (n_agents - 1) * T + 0.5))


def _check(n_agents: int, T: int, ego_index: int, pct: float) -> None:
    if not 0.0 <= pct <= 1.0:
        raise ValueError(f"blackout fraction must lie in [0, 1], got {pct}")
    if n_agents < 1 or T < 1:
        raise ValueError(f"need at least one agent and one timestep, got {n_agents}x{T}")
    if not 0 <= ego_index < n_agents:
        raise ValueError(f"ego index {ego_index} outside {n_agents} agents")


def random_stepwise_mask(n_agents: int, T: int, ego_index: int, pct: float, seed=0) -> BlackoutMask:
    """Mask exactly ``round(pct * (n_agents - 1) * T)`` non-ego slots drawn without replacement."""
    _check(n_agents, T, ego_index, pct)
    rng = np.random.default_rng(seed)
    others = np.array([i for i in range(n_agents) if i != ego_index], dtype=int)
    budget = slot_budget(n_agents, T, pct)
    chosen = rng.choice(len(others) * T, size=budget, replace=False)
    grid = np.zeros((n_agents, T), dtype=bool)
    grid[others[chosen // T], chosen % T] = True
    return BlackoutMask(grid, RANDOM, pct, seed, ego_index)


def _run_capacity(T: int, max_block: int) -> int:
    # most slots one row can hold with every run <= max_block
    return (T // (max_block + 1)) * max_block + min(T % (max_block + 1), max_block)


def _extend_ok(row: np.ndarray, t: int, max_block: int) -> bool:
    """Whether masking ``row[t]`` keeps the run through ``t`` within ``max_block``."""
    left = t
    while left > 0 and row[left - 1]:
        left -= 1
    right = t
    while right + 1 < len(row) and row[right + 1]:
        right += 1
    return right - left + 1 <= max_block


def sequential_block_mask(n_agents: int, T: int, ego_index: int, pct: float,
                          max_block: int = 10, seed=0) -> BlackoutMask:
    """Mask contiguous blocks of at most ``max_block`` steps until the slot budget is met.

    Each draw picks a non-ego agent, a length uniform in ``[1, max_block]`` and
    a start uniform over positions where the block fits. Slots already masked
    are skipped, as are slots that would join neighbouring blocks into a run
    longer than ``max_block``; the final block is cut at the budget.
    """
    _check(n_agents, T, ego_index, pct)
    if max_block < 1:
        raise ValueError(f"max_block must be >= 1, got {max_block}")
    rng = np.random.default_rng(seed)
    others = [i for i in range(n_agents) if i != ego_index]
    budget = slot_budget(n_agents, T, pct)
    if budget > len(others) * _run_capacity(T, max_block):
        raise ValueError(f"{pct:.0%} blackout cannot be met with runs of at most {max_block} steps")
    grid = np.zeros((n_agents, T), dtype=bool)
    count = stale = 0
    while count < budget:
        agent = others[rng.integers(len(others))]
        length = int(rng.integers(1, min(max_block, T) + 1))
        start = int(rng.integers(0, T - length + 1))
        row = grid[agent]
        before = count
        for t in range(start, start + length):
            if count == budget:
                break
            if not row[t] and _extend_ok(row, t, max_block):
                row[t] = True
                count += 1
        stale = stale + 1 if count == before else 0
        if stale >= 1000 and not any(
            not grid[i, t] and _extend_ok(grid[i], t, max_block) for i in others for t in range(T)
        ):
            # near capacity the blocks can pack so that no free slot may be added
            raise ValueError(f"{pct:.0%} blackout packed into a dead end with runs of at most {max_block} steps")
    return BlackoutMask(grid, SEQUENTIAL, pct, seed, ego_index)


def make_mask(mode: str, n_agents: int, T: int, ego_index: int, pct: float,
              max_block: int = 10, seed=0) -> BlackoutMask:
    key = mode.lower()
    if key in ("random", RANDOM.lower()):
        return random_stepwise_mask(n_agents, T, ego_index, pct, seed)
    if key in ("sequential", SEQUENTIAL.lower()):
        return sequential_block_mask(n_agents, T, ego_index, pct, max_block, seed)
    raise ValueError(f"unknown blackout mode {mode!r}; use 'random' or 'sequential'")


@dataclass(frozen=True, eq=False)
class MaskedView:
    """A scenario seen by one ego with some peers absent at some steps."""

    scenario: Scenario
    ego_id: str
    grid: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~self.grid.T

    def agents_at(self, t: int) -> list[str]:
        return [a.agent_id for a, gone in zip(self.scenario.agents, self.grid[:, t]) if not gone]


def apply_mask(scenario: Scenario, ego_id: str, mask=None) -> MaskedView:
    """Attach a mask (a BlackoutMask, a bare ``(N, T)`` grid or None) to a scenario."""
    ego = scenario.agent_index(ego_id)
    shape = (scenario.n_agents, scenario.T)
    if mask is None:
        grid = np.zeros(shape, dtype=bool)
    else:
        grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    if grid.shape != shape:
        raise ValueError(f"mask shape {grid.shape} does not match scenario {shape}")
    if grid[ego].any():
        raise ValueError("blackout mask covers the ego agent")
    return MaskedView(scenario, ego_id, grid)
