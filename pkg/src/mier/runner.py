"""Mode execution: wires resolved configs to the training loops and files.

Meta-train checkpoints bundle everything test-time adaptation needs: model
parameters and context, the input normalizer, the policy networks, and the
full multitask replay buffer, so `adapt` and `eval` runs are self-contained
given a checkpoint plus the echoed config.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from . import envs, orchestrate
from .checkpoint import read_checkpoint, write_checkpoint
from .config import Resolved, RunConfig, echo_resolved
from .diffcore import ContextVector, ParamVector
from .dynmodel import Dataset, DynamicsModel
from .errors import ConfigError, UsageError
from .gradcheck import run_battery
from .metrics import MetricsRow, MetricsWriter
from .orchestrate import MetaTrainState
from .policy import SacAgent
from .replay import MultitaskReplayBuffer
from .seeding import rng_streams

log = logging.getLogger("mier")


def state_to_tensors(state: MetaTrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {
        "model_params": state.theta.values.copy(),
        "model_context": state.phi.values.copy(),
    }
    tensors.update(state.model.normalizer.state_arrays())
    tensors.update(state.agent.state_arrays())
    tensors["samples_collected"] = np.array([float(state.samples_collected)])
    for tid in state.buffer.task_ids():
        data = state.buffer.task_dataset(tid)
        tensors[f"buf/{tid}/states"] = data.states
        tensors[f"buf/{tid}/actions"] = data.actions
        tensors[f"buf/{tid}/next_states"] = data.next_states
        tensors[f"buf/{tid}/rewards"] = data.rewards
        tensors[f"buf/{tid}/step_indices"] = data.step_indices.astype(np.float64)
    for tid, phi in state.task_contexts.items():
        tensors[f"task_ctx/{tid}"] = phi.values.copy()
    return tensors


def tensors_to_state(tensors: dict[str, np.ndarray], resolved: Resolved) -> MetaTrainState:
    model = DynamicsModel(resolved.model)
    model.normalizer.load_state_arrays(tensors)
    theta = ParamVector(tensors["model_params"], model.shape)
    phi = ContextVector(tensors["model_context"])
    agent = SacAgent(
        resolved.sac,
        resolved.model.state_dim,
        resolved.model.action_dim,
        resolved.model.d_ctx,
        np.random.default_rng(0),
    )
    agent.load_state_arrays(tensors)
    buffer = MultitaskReplayBuffer(
        resolved.model.state_dim, resolved.model.action_dim, resolved.replay_capacity
    )
    task_contexts: dict[int, ContextVector] = {}
    for name, array in tensors.items():
        if name.startswith("buf/") and name.endswith("/states"):
            tid = int(name.split("/")[1])
            buffer.insert(
                tid,
                Dataset(
                    tensors[f"buf/{tid}/states"],
                    tensors[f"buf/{tid}/actions"],
                    tensors[f"buf/{tid}/next_states"],
                    tensors[f"buf/{tid}/rewards"],
                    tensors[f"buf/{tid}/step_indices"].astype(np.int64),
                ),
            )
        elif name.startswith("task_ctx/"):
            task_contexts[int(name.split("/")[1])] = ContextVector(array)
    return MetaTrainState(
        model=model,
        theta=theta,
        phi=phi,
        agent=agent,
        buffer=buffer,
        train_tasks=[],
        task_contexts=task_contexts,
        samples_collected=int(tensors.get("samples_collected", np.zeros(1)).ravel()[0]),
    )


def _prepare_out_dir(cfg: RunConfig, resolved: Resolved) -> Path:
    out_dir = resolved.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.cfg").write_text(echo_resolved(cfg, resolved), encoding="utf-8")
    return out_dir


def _clock(resolved: Resolved):
    if resolved.deterministic_timestamps:
        return lambda: 0.0
    return time.monotonic


def run_meta_train(cfg: RunConfig, resolved: Resolved) -> MetaTrainState:
    out_dir = _prepare_out_dir(cfg, resolved)
    rngs = rng_streams(resolved.seed)

    def on_checkpoint(iteration: int, state: MetaTrainState):
        write_checkpoint(out_dir / f"ckpt_{iteration}.bin", state_to_tensors(state))

    with MetricsWriter(out_dir / "metrics.csv") as writer:
        state = orchestrate.meta_train(
            resolved.env,
            resolved.model,
            resolved.sac,
            resolved.meta,
            rngs,
            run_id=resolved.run_id,
            on_row=writer.write,
            on_checkpoint=on_checkpoint,
            clock=_clock(resolved),
        )
    final = resolved.meta.outer_iterations
    if not (out_dir / f"ckpt_{final}.bin").exists():
        write_checkpoint(out_dir / f"ckpt_{final}.bin", state_to_tensors(state))
    return state


def _load_state_for(cfg_mode: str, resolved: Resolved) -> MetaTrainState:
    if not resolved.checkpoint:
        raise ConfigError(f"{cfg_mode} mode needs run.checkpoint (or --checkpoint)")
    tensors = read_checkpoint(resolved.checkpoint)
    return tensors_to_state(tensors, resolved)


def run_adapt(cfg: RunConfig, resolved: Resolved) -> list[orchestrate.AdaptResult]:
    out_dir = _prepare_out_dir(cfg, resolved)
    state = _load_state_for("adapt", resolved)
    rngs = rng_streams(resolved.seed)
    split = envs.get_split(resolved.env.family, resolved.env.split)
    n_tasks = resolved.env.n_test_tasks
    tasks = envs.enumerate_tasks(split, "test", n_tasks, rngs["sampling"])
    max_tasks = cfg.values["adapt.max_tasks"]
    if max_tasks:
        tasks = tasks[:max_tasks]
    clock = _clock(resolved)
    t0 = clock()
    results = []
    with MetricsWriter(out_dir / "metrics.csv") as writer:
        for i, task in enumerate(tasks):
            result = orchestrate.adapt(state, task, resolved.adapt, rngs, resolved.env.horizon)
            results.append(result)
            writer.write(
                MetricsRow(
                    run_id=resolved.run_id,
                    phase="adapt_pre",
                    iteration=i,
                    samples_collected=resolved.adapt.adapt_points,
                    mean_return=result.return_pre,
                    synthetic_transitions_used=0,
                    wall_seconds=clock() - t0,
                )
            )
            writer.write(
                MetricsRow(
                    run_id=resolved.run_id,
                    phase="adapt",
                    iteration=i,
                    samples_collected=resolved.adapt.adapt_points,
                    mean_return=result.return_post,
                    synthetic_transitions_used=result.synthetic_transitions_used,
                    wall_seconds=clock() - t0,
                )
            )
            log.info(
                "task %d: pre=%.2f post=%.2f gate=%s synthetic=%d",
                i,
                result.return_pre,
                result.return_post,
                result.report.gate_passed,
                result.synthetic_transitions_used,
            )
    return results


def run_eval(cfg: RunConfig, resolved: Resolved) -> list[float]:
    out_dir = _prepare_out_dir(cfg, resolved)
    state = _load_state_for("eval", resolved)
    rngs = rng_streams(resolved.seed)
    split = envs.get_split(resolved.env.family, resolved.env.split)
    count = resolved.eval_tasks or (
        resolved.env.n_test_tasks if resolved.eval_partition == "test" else resolved.env.n_train_tasks
    )
    tasks = envs.enumerate_tasks(split, resolved.eval_partition, count, rngs["sampling"])
    returns = orchestrate.evaluate(
        state.model,
        state.theta,
        state.phi,
        state.agent,
        tasks,
        resolved.eval_episodes,
        rngs,
        resolved.env.horizon,
        adapt_points=resolved.eval_adapt_points or None,
    )
    clock = _clock(resolved)
    with MetricsWriter(out_dir / "metrics.csv") as writer:
        for i, ret in enumerate(returns):
            writer.write(
                MetricsRow(
                    run_id=resolved.run_id,
                    phase="eval",
                    iteration=i,
                    samples_collected=0,
                    mean_return=ret,
                    wall_seconds=clock(),
                )
            )
    return returns


def run_check_grads(resolved: Resolved) -> bool:
    reports = run_battery(resolved.seed, resolved.gradcheck_trials, resolved.gradcheck_tolerance)
    ok = True
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_err:.3e} over {r.trials} trials (tol {r.tolerance:g})")
        ok = ok and r.passed
    return ok
