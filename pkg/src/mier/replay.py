"""Per-task replay storage, cross-task sampling, and experience relabeling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynmodel import Dataset, DynamicsModel
from .diffcore import ContextVector, ParamVector
from .errors import BufferNotReady, ShapeError, UsageError

DEFAULT_TASK_CAPACITY = 100_000
DEFAULT_CROSS_TASK_COUNT = 20
DEFAULT_CROSS_TASK_POOL = 100_000


class _TaskStore:
    """Preallocated FIFO ring for one task's transitions."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.rewards = np.zeros(capacity)
        self.step_indices = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def insert(self, batch: Dataset):
        for i in range(len(batch)):
            j = self.pos
            self.states[j] = batch.states[i]
            self.actions[j] = batch.actions[i]
            self.next_states[j] = batch.next_states[i]
            self.rewards[j] = batch.rewards[i]
            self.step_indices[j] = batch.step_indices[i]
            self.pos = (self.pos + 1) % self.capacity
            self.inserted += 1

    def _logical_order(self) -> np.ndarray:
        """Physical indices from oldest to newest."""
        n = len(self)
        if self.inserted <= self.capacity:
            return np.arange(n)
        return (np.arange(n) + self.pos) % self.capacity

    def dataset(self, logical_idx=None) -> Dataset:
        order = self._logical_order()
        sel = order if logical_idx is None else order[np.asarray(logical_idx)]
        return Dataset(
            self.states[sel], self.actions[sel], self.next_states[sel], self.rewards[sel], self.step_indices[sel]
        )


class MultitaskReplayBuffer:
    """Transition stores keyed by task id, with per-task FIFO eviction."""

    def __init__(self, state_dim: int, action_dim: int, capacity_per_task: int = DEFAULT_TASK_CAPACITY):
        if capacity_per_task < 1:
            raise UsageError("capacity must be positive")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity_per_task = capacity_per_task
        self._stores: dict[int, _TaskStore] = {}

    def insert(self, task_id: int, batch: Dataset):
        if len(batch) == 0:
            return
        if batch.states.shape[1] != self.state_dim or batch.actions.shape[1] != self.action_dim:
            raise ShapeError("batch dims do not match buffer dims")
        store = self._stores.get(task_id)
        if store is None:
            store = _TaskStore(self.state_dim, self.action_dim, self.capacity_per_task)
            self._stores[task_id] = store
        store.insert(batch)

    def task_ids(self) -> list[int]:
        return sorted(tid for tid, s in self._stores.items() if len(s) > 0)

    def size(self, task_id: int) -> int:
        store = self._stores.get(task_id)
        return 0 if store is None else len(store)

    def total_size(self) -> int:
        return sum(len(s) for s in self._stores.values())

    def task_dataset(self, task_id: int) -> Dataset:
        if task_id not in self._stores:
            raise UsageError(f"unknown task id {task_id}")
        return self._stores[task_id].dataset()

    def sample_task_batches(
        self, rng: np.random.Generator, batch_size: int
    ) -> tuple[int, Dataset, Dataset]:
        """Uniform task with two disjoint uniformly drawn batches."""
        ready = [tid for tid in self.task_ids() if self.size(tid) >= 2 * batch_size]
        if not ready:
            raise BufferNotReady(f"no task holds {2 * batch_size} transitions yet")
        task_id = ready[int(rng.integers(len(ready)))]
        store = self._stores[task_id]
        idx = rng.choice(len(store), size=2 * batch_size, replace=False)
        return task_id, store.dataset(idx[:batch_size]), store.dataset(idx[batch_size:])

    def sample_cross_task(
        self,
        rng: np.random.Generator,
        n: int,
        cross_task_count: int = DEFAULT_CROSS_TASK_COUNT,
        pool_cap: int = DEFAULT_CROSS_TASK_POOL,
    ) -> tuple[Dataset, list[int]]:
        """Pool data from up to cross_task_count tasks, then draw n sources."""
        ids = self.task_ids()
        if not ids:
            raise BufferNotReady("buffer is empty")
        if len(ids) > cross_task_count:
            chosen = rng.choice(len(ids), size=cross_task_count, replace=False)
            ids = [ids[int(i)] for i in sorted(chosen)]
        per_task = max(1, pool_cap // len(ids))
        parts = []
        for tid in ids:
            store = self._stores[tid]
            if len(store) > per_task:
                parts.append(store.dataset(rng.choice(len(store), size=per_task, replace=False)))
            else:
                parts.append(store.dataset())
        pool = Dataset.concat(parts)
        take = rng.integers(len(pool), size=n)
        return pool.subset(take), ids


@dataclass
class SyntheticBatch:
    """Relabeled transitions plus their provenance."""

    transitions: Dataset
    source_tasks: list[int] = field(default_factory=list)
    relabel_mode: str = "reward_only"


def relabel(
    buf: MultitaskReplayBuffer,
    model: DynamicsModel,
    theta: ParamVector,
    phi: ContextVector,
    n: int,
    mode: str = "reward_only",
    policy_for_actions=None,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
    cross_task_count: int = DEFAULT_CROSS_TASK_COUNT,
    pool_cap: int = DEFAULT_CROSS_TASK_POOL,
) -> SyntheticBatch:
    """Regenerate experience for the adapted task from cross-task sources.

    reward_only keeps (s, a, s') bit-identically and replaces the reward with
    the adapted model's prediction. full keeps s, optionally resamples the
    action from the adapted policy, and predicts (s', r) with the model.
    """
    if mode not in ("reward_only", "full"):
        raise UsageError(f"unknown relabel mode {mode!r}")
    if rng is None:
        raise UsageError("relabel needs an rng")
    if n < 1:
        raise UsageError("relabel count must be positive")
    sources, ids = buf.sample_cross_task(rng, n, cross_task_count, pool_cap)
    if sources.states.shape[1] != model.cfg.state_dim or sources.actions.shape[1] != model.cfg.action_dim:
        raise UsageError("model dims do not match buffer dims")

    if mode == "reward_only":
        _, rewards = model.predict(theta, phi, sources.states, sources.actions, stochastic=stochastic, rng=rng)
        out = Dataset(sources.states, sources.actions, sources.next_states, rewards, sources.step_indices)
        return SyntheticBatch(out, ids, mode)

    if not model.cfg.predict_state:
        raise UsageError("full relabeling needs a state-predicting model")
    actions = sources.actions
    if policy_for_actions is not None:
        actions = np.stack(
            [policy_for_actions(sources.states[i], rng) for i in range(len(sources))]
        )
    next_states, rewards = model.predict(theta, phi, sources.states, actions, stochastic=stochastic, rng=rng)
    out = Dataset(sources.states, actions, next_states, rewards, sources.step_indices)
    return SyntheticBatch(out, ids, mode)


def mixed_batch(
    real: Optional[Dataset],
    synthetic: Optional[Dataset],
    real_fraction: float,
    batch_size: int,
    rng: np.random.Generator,
) -> Dataset:
    """ceil(real_fraction * batch_size) real rows, remainder synthetic."""
    if not 0.0 <= real_fraction <= 1.0:
        raise UsageError("real_fraction must be in [0, 1]")
    n_real = int(np.ceil(real_fraction * batch_size))
    n_syn = batch_size - n_real
    parts = []
    if n_real > 0:
        if real is None or len(real) == 0:
            raise UsageError("real data requested but none available")
        parts.append(real.subset(rng.integers(len(real), size=n_real)))
    if n_syn > 0:
        if synthetic is None or len(synthetic) == 0:
            raise UsageError("synthetic data requested but none available")
        parts.append(synthetic.subset(rng.integers(len(synthetic), size=n_syn)))
    return Dataset.concat(parts)
