"""Top-level loops: meta-training, test-time adaptation, evaluation.

Meta-training alternates exploration with an inner loop that takes clipped
meta-gradient steps on the model (averaged over a task meta-batch) and SAC
steps on the policy, each SAC batch conditioned on its task's freshest
adapted context. Test-time adaptation continues adapting the model on data
from the new task and, when the validation gate admits it, trains the policy
on relabeled cross-task experience mixed with a small real fraction.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import envs
from .diffcore import Adam, ContextVector, ParamVector, clip_gradient_norm
from .dynmodel import AdaptReport, Dataset, DynamicsModel, ModelConfig
from .errors import BufferNotReady, NumericError, UsageError
from .metrics import MetricsRow
from .policy import SacAgent, SacBatch, SacConfig
from .replay import MultitaskReplayBuffer, mixed_batch, relabel

log = logging.getLogger("mier")

RowSink = Optional[Callable[[MetricsRow], None]]


@dataclass
class EnvConfig:
    family: str = "vel1d"
    split: str = "hard"
    n_train_tasks: int = 100
    n_test_tasks: int = 30
    horizon: int = envs.DEFAULT_HORIZON


@dataclass
class MetaTrainConfig:
    outer_iterations: int = 100
    policy_steps_per_iter: int = 1000
    model_meta_steps_per_iter: int = 50
    episodes_per_task: int = 1
    gradient_norm_clip: float = 10.0
    outer_lr: float = 3e-4
    model_batch_size: int = 128
    eval_interval: int = 10
    eval_episodes: int = 1
    eval_tasks: int = 5
    checkpoint_interval: int = 50

    def __post_init__(self):
        if min(self.policy_steps_per_iter, self.model_meta_steps_per_iter, self.episodes_per_task) < 0:
            raise UsageError("step counts must be non-negative")
        if self.gradient_norm_clip <= 0:
            raise UsageError("gradient_norm_clip must be positive")


@dataclass
class AdaptConfig:
    adapt_points: int = 200
    n_fast: int = 10
    m_steps: int = 100
    policy_steps_per_round: int = 250
    total_policy_steps: int = 2500
    gate_threshold: float = -3.0
    relabel_mode: str = "reward_only"
    real_fraction: float = 0.05
    synthetic_batch_size: int = 2048
    resample_actions: bool = True
    stochastic_relabel: bool = True
    val_frac: float = 0.8
    full_step_lr: float = 3e-4
    context_grad_clip: float = 10.0
    eval_episodes: int = 3

    def __post_init__(self):
        if self.adapt_points < 2:
            raise UsageError("adapt_points must be >= 2")


def family_adapt_defaults(family: str) -> dict:
    """Per-family adaptation protocol: points collected, context-only steps,
    full-model steps, and what relabeling replaces."""
    return {
        "vel1d": dict(adapt_points=200, n_fast=10, m_steps=100, relabel_mode="reward_only"),
        "dir2d": dict(adapt_points=400, n_fast=20, m_steps=0, relabel_mode="reward_only"),
        "negated_actions": dict(adapt_points=400, n_fast=10, m_steps=0, relabel_mode="full"),
        "rand_params": dict(adapt_points=400, n_fast=10, m_steps=100, relabel_mode="full"),
    }[family]


def family_task_counts(family: str) -> tuple[int, int]:
    """(train, test) task-set sizes per family."""
    return {
        "vel1d": (100, 30),
        "dir2d": (100, 10),
        "negated_actions": (8, 8),
        "rand_params": (40, 20),
    }[family]


@dataclass
class MetaTrainState:
    model: DynamicsModel
    theta: ParamVector
    phi: ContextVector
    agent: SacAgent
    buffer: MultitaskReplayBuffer
    train_tasks: list[envs.TaskSpec]
    task_contexts: dict[int, ContextVector] = field(default_factory=dict)
    samples_collected: int = 0
    meta_grad_norms: list[float] = field(default_factory=list)
    iterations_done: int = 0
    last_checkpoint_iteration: int | None = None


def _collect_episodes(
    task: envs.TaskSpec,
    agent: SacAgent,
    phi: ContextVector,
    episodes: int,
    horizon: int,
    rng: np.random.Generator,
    mode: str = "sample",
) -> tuple[Dataset, float]:
    parts, returns = [], []
    for _ in range(episodes):
        data, ret = envs.rollout(
            task,
            lambda obs: agent.act(obs, phi.values, mode=mode, rng=rng),
            horizon=horizon,
            rng=rng,
        )
        parts.append(data)
        returns.append(ret)
    return Dataset.concat(parts), float(np.mean(returns))


def _collect_points(
    task: envs.TaskSpec,
    agent: SacAgent,
    phi: ContextVector,
    n_points: int,
    horizon: int,
    rng: np.random.Generator,
) -> Dataset:
    parts, have = [], 0
    while have < n_points:
        data, _ = envs.rollout(
            task,
            lambda obs: agent.act(obs, phi.values, mode="sample", rng=rng),
            horizon=horizon,
            rng=rng,
        )
        parts.append(data)
        have += len(data)
    full = Dataset.concat(parts)
    return full.subset(np.arange(n_points))


def _sac_batch(data: Dataset, phi: ContextVector) -> SacBatch:
    ctx = np.broadcast_to(phi.values, (len(data), phi.values.size)).copy()
    return SacBatch(data.states, data.actions, data.rewards, data.next_states, ctx)


def meta_train(
    env_cfg: EnvConfig,
    model_cfg: ModelConfig,
    sac_cfg: SacConfig,
    meta_cfg: MetaTrainConfig,
    rngs: dict[str, np.random.Generator],
    run_id: str = "run",
    on_row: RowSink = None,
    on_checkpoint: Optional[Callable[[int, "MetaTrainState"], None]] = None,
    clock: Optional[Callable[[], float]] = None,
) -> MetaTrainState:
    """Meta-train the model and the context-conditioned policy."""
    split = envs.get_split(env_cfg.family, env_cfg.split)
    state_dim, action_dim = envs.family_dims(env_cfg.family)
    if (model_cfg.state_dim, model_cfg.action_dim) != (state_dim, action_dim):
        raise UsageError("model dims do not match the env family")
    train_tasks = envs.enumerate_tasks(split, "train", env_cfg.n_train_tasks, rngs["sampling"])

    model = DynamicsModel(model_cfg)
    theta = model.init_params(rngs["model-init"])
    phi = model.init_context(rngs["model-init"])
    agent = SacAgent(sac_cfg, state_dim, action_dim, model_cfg.d_ctx, rngs["policy-init"])
    buffer = MultitaskReplayBuffer(state_dim, action_dim)
    state = MetaTrainState(model, theta, phi, agent, buffer, train_tasks)

    opt = Adam(lr=meta_cfg.outer_lr)
    n_theta = theta.values.size
    elapsed = clock if clock is not None else (lambda: 0.0)
    t0 = elapsed()

    for it in range(meta_cfg.outer_iterations):
        try:
            _meta_train_iteration(
                state, it, split, env_cfg, model_cfg, sac_cfg, meta_cfg, rngs, run_id, on_row, elapsed, t0, opt, n_theta
            )
        except NumericError as exc:
            ref = (
                f"last good checkpoint: iteration {state.last_checkpoint_iteration}"
                if state.last_checkpoint_iteration is not None
                else "no checkpoint written yet"
            )
            raise NumericError(f"meta-training diverged at iteration {it} ({exc}); {ref}") from exc
        state.iterations_done = it + 1
        if on_checkpoint and (it + 1) % meta_cfg.checkpoint_interval == 0:
            on_checkpoint(it + 1, state)
            state.last_checkpoint_iteration = it + 1

    return state


def _meta_train_iteration(
    state: MetaTrainState,
    it: int,
    split,
    env_cfg: EnvConfig,
    model_cfg: ModelConfig,
    sac_cfg: SacConfig,
    meta_cfg: MetaTrainConfig,
    rngs: dict[str, np.random.Generator],
    run_id: str,
    on_row: RowSink,
    elapsed,
    t0: float,
    opt: Adam,
    n_theta: int,
):
    model, agent, buffer, train_tasks = state.model, state.agent, state.buffer, state.train_tasks
    # -- explore one sampled task with the prior, then adapted, context
    tid = int(rngs["sampling"].integers(len(train_tasks)))
    task = train_tasks[tid]
    d_adapt, _ = _collect_episodes(
        task, agent, state.phi, meta_cfg.episodes_per_task, env_cfg.horizon, rngs["env"]
    )
    phi_task = model.adapt_context(state.theta, state.phi, d_adapt)
    d_eval, _ = _collect_episodes(
        task, agent, phi_task, meta_cfg.episodes_per_task, env_cfg.horizon, rngs["env"]
    )
    buffer.insert(tid, d_adapt)
    buffer.insert(tid, d_eval)
    model.normalizer.update(
        np.concatenate(
            [
                np.concatenate([d_adapt.states, d_adapt.actions], axis=1),
                np.concatenate([d_eval.states, d_eval.actions], axis=1),
            ]
        )
    )
    state.task_contexts[tid] = phi_task
    state.samples_collected += len(d_adapt) + len(d_eval)

    # -- inner loop: meta steps on (theta, phi) and SAC steps on psi
    meta_losses, critic_losses, actor_losses = [], [], []
    n_inner = max(meta_cfg.policy_steps_per_iter, meta_cfg.model_meta_steps_per_iter)
    for i in range(n_inner):
        if i < meta_cfg.model_meta_steps_per_iter:
            acc_t = np.zeros(n_theta)
            acc_p = np.zeros(model_cfg.d_ctx)
            got = 0
            for _ in range(model_cfg.meta_batch_size):
                try:
                    _, da, de = buffer.sample_task_batches(rngs["sampling"], meta_cfg.model_batch_size)
                except BufferNotReady:
                    break
                value, gradient = model.meta_loss(state.theta, state.phi, da, de)
                acc_t += gradient.wrt_params
                acc_p += gradient.wrt_context
                meta_losses.append(value)
                got += 1
            if got:
                parts, _ = clip_gradient_norm([acc_t / got, acc_p / got], meta_cfg.gradient_norm_clip)
                state.meta_grad_norms.append(
                    float(np.sqrt(sum(float(np.dot(p, p)) for p in parts)))
                )
                joint = opt.step(
                    np.concatenate([state.theta.values, state.phi.values]),
                    np.concatenate(parts),
                )
                state.theta = ParamVector(joint[:n_theta], model.shape)
                state.phi = ContextVector(joint[n_theta:])
        if i < meta_cfg.policy_steps_per_iter:
            try:
                tid2, half_a, half_b = buffer.sample_task_batches(rngs["sampling"], sac_cfg.batch_size // 2)
            except BufferNotReady:
                continue
            pair = Dataset.concat([half_a, half_b])
            losses = agent.update(_sac_batch(pair, state.task_contexts[tid2]), rngs["sampling"])
            critic_losses.append(0.5 * (losses["critic1_loss"] + losses["critic2_loss"]))
            actor_losses.append(losses["actor_loss"])

    # -- metrics and periodic artifacts
    mean_return = math.nan
    if meta_cfg.eval_tasks > 0 and (it + 1) % meta_cfg.eval_interval == 0:
        held_out = [
            envs.sample_task(split, "train", rngs["sampling"]) for _ in range(meta_cfg.eval_tasks)
        ]
        returns = evaluate(
            model, state.theta, state.phi, agent, held_out, meta_cfg.eval_episodes, rngs, env_cfg.horizon
        )
        mean_return = float(np.mean(returns))
    row = MetricsRow(
        run_id=run_id,
        phase="meta_train",
        iteration=it,
        samples_collected=state.samples_collected,
        model_meta_loss=float(np.mean(meta_losses)) if meta_losses else math.nan,
        critic_loss=float(np.mean(critic_losses)) if critic_losses else math.nan,
        actor_loss=float(np.mean(actor_losses)) if actor_losses else math.nan,
        mean_return=mean_return,
        synthetic_transitions_used=0,
        wall_seconds=elapsed() - t0,
    )
    if on_row:
        on_row(row)
    log.debug("iter %d meta_loss=%s", it, row.model_meta_loss)


@dataclass
class AdaptResult:
    theta: ParamVector
    phi: ContextVector
    agent: SacAgent
    report: AdaptReport
    return_pre: float
    return_post: float
    synthetic_transitions_used: int
    policy_steps_done: int


def adapt(
    state: MetaTrainState,
    test_task: envs.TaskSpec,
    adapt_cfg: AdaptConfig,
    rngs: dict[str, np.random.Generator],
    horizon: int = envs.DEFAULT_HORIZON,
) -> AdaptResult:
    """Adapt to one test task: context and model first, then the policy on
    relabeled experience when the validation gate admits the model.

    The meta-trained state is left untouched; the adapted policy comes back
    in the result, so every test task starts from the same starting point.
    """
    model = state.model
    agent = copy.deepcopy(state.agent)
    d_adapt = _collect_points(test_task, agent, state.phi, adapt_cfg.adapt_points, horizon, rngs["env"])
    theta2, phi_task, report = model.continued_adapt(
        state.theta,
        state.phi,
        d_adapt,
        adapt_cfg.n_fast,
        adapt_cfg.m_steps,
        adapt_cfg.val_frac,
        adapt_cfg.gate_threshold,
        adapt_cfg.full_step_lr,
        adapt_cfg.context_grad_clip,
    )

    def mean_return() -> float:
        returns = [
            envs.rollout(
                test_task,
                lambda obs: agent.act(obs, phi_task.values, mode="mean"),
                horizon=horizon,
                rng=rngs["env"],
            )[1]
            for _ in range(adapt_cfg.eval_episodes)
        ]
        return float(np.mean(returns))

    return_pre = mean_return()  # context-only adaptation, policy untouched

    synthetic_used = 0
    steps_done = 0
    if report.gate_passed and adapt_cfg.total_policy_steps > 0:
        policy_fn = None
        if adapt_cfg.resample_actions:
            policy_fn = lambda s, rng: agent.act(s, phi_task.values, mode="sample", rng=rng)
        n_real = int(np.ceil(adapt_cfg.real_fraction * agent.cfg.batch_size))
        while steps_done < adapt_cfg.total_policy_steps:
            syn = relabel(
                state.buffer,
                model,
                theta2,
                phi_task,
                adapt_cfg.synthetic_batch_size,
                mode=adapt_cfg.relabel_mode,
                policy_for_actions=policy_fn,
                rng=rngs["sampling"],
                stochastic=adapt_cfg.stochastic_relabel,
            )
            round_steps = min(adapt_cfg.policy_steps_per_round, adapt_cfg.total_policy_steps - steps_done)
            for _ in range(round_steps):
                data = mixed_batch(
                    d_adapt, syn.transitions, adapt_cfg.real_fraction, agent.cfg.batch_size, rngs["sampling"]
                )
                agent.update(_sac_batch(data, phi_task), rngs["sampling"])
                synthetic_used += agent.cfg.batch_size - n_real
                steps_done += 1
    else:
        log.info(
            "validation gate %s (val_loss=%s); skipping synthetic training",
            "failed" if not report.gate_passed else "idle",
            report.val_loss,
        )

    return_post = mean_return()
    return AdaptResult(
        theta2, phi_task, agent, report, return_pre, return_post, synthetic_used, steps_done
    )


def evaluate(
    model: DynamicsModel,
    theta: ParamVector,
    phi: ContextVector,
    agent: SacAgent,
    tasks: list[envs.TaskSpec],
    episodes: int,
    rngs: dict[str, np.random.Generator],
    horizon: int = envs.DEFAULT_HORIZON,
    adapt_points: Optional[int] = None,
) -> list[float]:
    """Per-task mean return of the mean-action policy after context adaptation."""
    if not tasks:
        raise UsageError("evaluate needs at least one task")
    out = []
    for task in tasks:
        n_points = horizon if adapt_points is None else adapt_points
        context_batch = _collect_points(task, agent, phi, n_points, horizon, rngs["env"])
        phi_task = model.adapt_context(theta, phi, context_batch)
        returns = [
            envs.rollout(
                task,
                lambda obs: agent.act(obs, phi_task.values, mode="mean"),
                horizon=horizon,
                rng=rngs["env"],
            )[1]
            for _ in range(episodes)
        ]
        out.append(float(np.mean(returns)))
    return out
