"""Desk-scale task families with declarative train/test splits.

Four point-mass families mirror the structural axes the method is exercised
on: reward extrapolation with shared dynamics (vel1d, dir2d) and dynamics
extrapolation with a shared reward readout (negated_actions, rand_params).

Dynamics constants are fixed so rollout returns are analytically derivable:
actions integrate into velocity with factor DT (0.1), velocity integrates
into position with factor DT, velocities are capped at V_MAX (3.0), and
every episode lasts exactly `horizon` steps. Velocities start at rest;
initial positions get uniform noise in [-INIT_NOISE, INIT_NOISE].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynmodel import Dataset, Transition
from .errors import ConfigError, UsageError

DT = 0.1
V_MAX = 3.0
INIT_NOISE = 0.1
DEFAULT_HORIZON = 200

FAMILIES = ("vel1d", "dir2d", "negated_actions", "rand_params")

# Fixed unit readout for negated_actions forward progress.
_READOUT4 = np.full(4, 0.5)  # unit norm in R^4


@dataclass(frozen=True)
class TaskSpec:
    """One MDP drawn from a task distribution."""

    family: str
    params: np.ndarray
    ood: bool = False

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64))


@dataclass
class EnvState:
    observation: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class SplitSpec:
    """Train/test task supports for a family; test may be out-of-distribution."""

    family: str
    name: str
    train_support: tuple
    test_support: tuple
    ood: bool = True


def family_dims(family: str) -> tuple[int, int]:
    """(state_dim, action_dim) for a family."""
    return {
        "vel1d": (2, 1),
        "dir2d": (4, 2),
        "negated_actions": (8, 4),
        "rand_params": (4, 2),
    }[family]


def reward_only(family: str) -> bool:
    """True when dynamics are identical across the family's tasks."""
    return family in ("vel1d", "dir2d")


def _masks_with_last(sign: int) -> list[np.ndarray]:
    """All 4-dim sign masks whose last entry equals `sign`, in binary order."""
    masks = []
    for bits in range(8):
        m = np.ones(4)
        for j in range(3):
            if (bits >> j) & 1:
                m[j] = -1.0
        m[3] = float(sign)
        masks.append(m)
    return masks


SPLITS: dict[tuple[str, str], SplitSpec] = {
    ("vel1d", "medium"): SplitSpec("vel1d", "medium", (0.0, 2.5), (2.5, 3.0)),
    ("vel1d", "hard"): SplitSpec("vel1d", "hard", (0.0, 1.5), (2.5, 3.0)),
    ("dir2d", "default"): SplitSpec("dir2d", "default", (0.0, 1.5 * np.pi), (1.5 * np.pi, 2.0 * np.pi)),
    ("negated_actions", "default"): SplitSpec(
        "negated_actions",
        "default",
        tuple(tuple(m) for m in _masks_with_last(+1)),
        tuple(tuple(m) for m in _masks_with_last(-1)),
    ),
    ("rand_params", "default"): SplitSpec("rand_params", "default", (0.5, 1.5), (1.6, 2.0)),
}


def get_split(family: str, name: str) -> SplitSpec:
    try:
        return SPLITS[(family, name)]
    except KeyError:
        raise ConfigError(f"unknown split {name!r} for family {family!r}") from None


def sample_task(split: SplitSpec, partition: str, rng: np.random.Generator) -> TaskSpec:
    if partition not in ("train", "test"):
        raise ConfigError(f"unknown partition {partition!r}")
    support = split.train_support if partition == "train" else split.test_support
    ood = split.ood and partition == "test"
    fam = split.family
    if fam in ("vel1d", "dir2d"):
        lo, hi = support
        if not hi > lo:
            raise ConfigError(f"empty support {support} for {fam}")
        return TaskSpec(fam, np.array([rng.uniform(lo, hi)]), ood)
    if fam == "negated_actions":
        if not support:
            raise ConfigError("empty mask set")
        idx = int(rng.integers(len(support)))
        return TaskSpec(fam, np.asarray(support[idx]), ood)
    if fam == "rand_params":
        lo, hi = support
        return TaskSpec(fam, rng.uniform(lo, hi, size=2), ood)
    raise ConfigError(f"unknown family {fam!r}")


def in_train_support(split: SplitSpec, task: TaskSpec) -> bool:
    if split.family in ("vel1d", "dir2d"):
        lo, hi = split.train_support
        return bool(lo <= task.params[0] <= hi)
    if split.family == "negated_actions":
        return any(np.array_equal(task.params, np.asarray(m)) for m in split.train_support)
    lo, hi = split.train_support
    return bool(np.all((task.params >= lo) & (task.params <= hi)))


def enumerate_tasks(split: SplitSpec, partition: str, count: int, rng: np.random.Generator) -> list[TaskSpec]:
    """A fixed task set for a partition; mask families enumerate exhaustively."""
    if split.family == "negated_actions":
        support = split.train_support if partition == "train" else split.test_support
        ood = split.ood and partition == "test"
        masks = [TaskSpec(split.family, np.asarray(m), ood) for m in support]
        return masks[: count or len(masks)]
    return [sample_task(split, partition, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# dynamics


def reset(task: TaskSpec, rng: np.random.Generator, horizon: int = DEFAULT_HORIZON) -> EnvState:
    state_dim, _ = family_dims(task.family)
    n_pos = state_dim // 2
    obs = np.zeros(state_dim)
    obs[:n_pos] = rng.uniform(-INIT_NOISE, INIT_NOISE, size=n_pos)
    return EnvState(observation=obs, t=0)


def _clip_action(action: np.ndarray, action_dim: int) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (action_dim,):
        raise UsageError(f"action shape {action.shape} != ({action_dim},)")
    return np.clip(action, -1.0, 1.0)


def step(
    task: TaskSpec,
    st: EnvState,
    action: np.ndarray,
    horizon: int = DEFAULT_HORIZON,
) -> tuple[EnvState, float, bool]:
    if st.t >= horizon:
        raise UsageError("episode is finished; reset before stepping")
    _, action_dim = family_dims(task.family)
    a = _clip_action(action, action_dim)
    obs = st.observation
    fam = task.family

    if fam == "vel1d":
        x, v = obs
        v = float(np.clip(v + DT * a[0], -V_MAX, V_MAX))
        x = x + DT * v
        new_obs = np.array([x, v])
        reward = -abs(v - task.params[0])
    elif fam in ("dir2d", "rand_params"):
        pos, vel = obs[:2].copy(), obs[2:].copy()
        gain = task.params if fam == "rand_params" else 1.0
        vel = vel + DT * gain * a
        speed = float(np.linalg.norm(vel))
        if speed > V_MAX:
            vel = vel * (V_MAX / speed)
        pos = pos + DT * vel
        new_obs = np.concatenate([pos, vel])
        if fam == "dir2d":
            angle = task.params[0]
            direction = np.array([np.cos(angle), np.sin(angle)])
        else:
            direction = np.array([1.0, 0.0])  # fixed forward readout
        reward = float(vel @ direction)
    elif fam == "negated_actions":
        pos, vel = obs[:4].copy(), obs[4:].copy()
        vel = np.clip(vel + DT * (a * task.params), -V_MAX, V_MAX)
        pos = pos + DT * vel
        new_obs = np.concatenate([pos, vel])
        reward = float(vel @ _READOUT4)
    else:
        raise ConfigError(f"unknown family {fam!r}")

    new_state = EnvState(observation=new_obs, t=st.t + 1)
    done = new_state.t == horizon
    return new_state, float(reward), done


def per_step_reward_bound(family: str) -> float:
    """Largest achievable single-step reward, from the dynamics constants."""
    if family == "vel1d":
        return 0.0
    # Projected speed is capped by the velocity clamp.
    return V_MAX


PolicyFn = Callable[[np.ndarray], np.ndarray]


def rollout(
    task: TaskSpec,
    policy: PolicyFn,
    horizon: int = DEFAULT_HORIZON,
    rng: np.random.Generator | None = None,
    start: EnvState | None = None,
) -> tuple[Dataset, float]:
    """Run one episode; returns collected transitions and the return."""
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    if rng is None and start is None:
        raise UsageError("rollout needs an rng or an explicit start state")
    st = start if start is not None else reset(task, rng, horizon)
    transitions = []
    total = 0.0
    done = False
    while not done:
        action = np.clip(np.asarray(policy(st.observation), dtype=np.float64), -1.0, 1.0)
        nxt, reward, done = step(task, st, action, horizon)
        transitions.append(
            Transition(
                state=st.observation,
                action=action,
                next_state=nxt.observation,
                reward=reward,
                step_index=st.t,
            )
        )
        total += reward
        st = nxt
    return Dataset.from_transitions(transitions), total


def scripted_vel1d_policy(v_target: float) -> PolicyFn:
    """Proportional controller that ramps to the target speed in |v_t|/DT steps."""

    def policy(obs: np.ndarray) -> np.ndarray:
        return np.array([np.clip((v_target - obs[1]) / DT, -1.0, 1.0)])

    return policy


def vel1d_oracle_return(v_target: float, horizon: int = DEFAULT_HORIZON) -> float:
    """Return of the scripted controller from rest, ignoring init position noise.

    The speed ramps by DT per step until it hits the target, so the cost is
    the sum of the shrinking speed errors; after the ramp every step is free.
    """
    total = 0.0
    v = 0.0
    for _ in range(horizon):
        v = min(v + DT, v_target)
        total -= abs(v - v_target)
    return total
