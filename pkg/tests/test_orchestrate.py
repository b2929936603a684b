"""Meta-training and adaptation loop contracts on tiny budgets."""

import numpy as np
import pytest

from mier import envs, orchestrate as orch
from mier.dynmodel import ModelConfig
from mier.errors import UsageError
from mier.policy import SacConfig
from mier.seeding import rng_streams


def small_cfgs(family="vel1d", split="hard", **meta_kw):
    state_dim, action_dim = envs.family_dims(family)
    env_cfg = orch.EnvConfig(family=family, split=split, n_train_tasks=6, horizon=50)
    model_cfg = ModelConfig(
        state_dim=state_dim,
        action_dim=action_dim,
        d_ctx=3,
        predict_state=not envs.reward_only(family),
        hidden_dims=(16, 16),
    )
    sac_cfg = SacConfig(hidden_dims=(16, 16), batch_size=32)
    meta_kw.setdefault("outer_iterations", 3)
    meta_kw.setdefault("policy_steps_per_iter", 5)
    meta_kw.setdefault("model_meta_steps_per_iter", 2)
    meta_kw.setdefault("model_batch_size", 16)
    meta_kw.setdefault("eval_interval", 100)
    meta_cfg = orch.MetaTrainConfig(**meta_kw)
    return env_cfg, model_cfg, sac_cfg, meta_cfg


def run_small(seed=0, **meta_kw):
    env_cfg, model_cfg, sac_cfg, meta_cfg = small_cfgs(**meta_kw)
    rows = []
    state = orch.meta_train(env_cfg, model_cfg, sac_cfg, meta_cfg, rng_streams(seed), on_row=rows.append)
    return state, rows


def test_zero_iterations_returns_initialized_state():
    state, rows = run_small(outer_iterations=0)
    assert rows == []
    assert state.buffer.total_size() == 0
    assert state.samples_collected == 0
    assert np.all(np.isfinite(state.theta.values))


def test_buffer_task_count_matches_distinct_sampled_tasks():
    state, _ = run_small(outer_iterations=5)
    assert len(state.buffer.task_ids()) == len(state.task_contexts)
    assert state.samples_collected == 5 * 2 * 50


def test_metrics_rows_emitted_per_iteration():
    _, rows = run_small(outer_iterations=4)
    assert [r.iteration for r in rows] == [0, 1, 2, 3]
    assert all(r.phase == "meta_train" for r in rows)
    assert all(rows[i].samples_collected < rows[i + 1].samples_collected for i in range(3))


def test_meta_grad_norms_respect_clip():
    clip = 0.05  # tight enough that raw gradients exceed it
    state, _ = run_small(outer_iterations=3, gradient_norm_clip=clip)
    assert state.meta_grad_norms, "no meta steps ran"
    assert all(n <= clip + 1e-12 for n in state.meta_grad_norms)


def test_meta_train_determinism():
    _, rows_a = run_small(seed=7, outer_iterations=3)
    _, rows_b = run_small(seed=7, outer_iterations=3)
    assert [(r.model_meta_loss, r.critic_loss, r.actor_loss) for r in rows_a] == [
        (r.model_meta_loss, r.critic_loss, r.actor_loss) for r in rows_b
    ]
    state_a, _ = run_small(seed=7, outer_iterations=3)
    state_b, _ = run_small(seed=7, outer_iterations=3)
    assert np.array_equal(state_a.theta.values, state_b.theta.values)
    assert np.array_equal(state_a.agent.state.actor.values, state_b.agent.state.actor.values)


def adapt_cfg(**kw):
    kw.setdefault("adapt_points", 40)
    kw.setdefault("n_fast", 2)
    kw.setdefault("m_steps", 3)
    kw.setdefault("policy_steps_per_round", 4)
    kw.setdefault("total_policy_steps", 8)
    kw.setdefault("synthetic_batch_size", 64)
    kw.setdefault("eval_episodes", 1)
    return orch.AdaptConfig(**kw)


def test_adapt_noop_budget_keeps_policy_and_reports_prior_return():
    state, _ = run_small(outer_iterations=4)
    rngs = rng_streams(11)
    task = envs.sample_task(envs.get_split("vel1d", "hard"), "test", rngs["sampling"])
    actor_before = state.agent.state.actor.values.copy()
    cfg = adapt_cfg(n_fast=0, m_steps=0, total_policy_steps=0)
    result = orch.adapt(state, task, cfg, rngs, horizon=50)
    assert np.array_equal(state.agent.state.actor.values, actor_before)
    assert np.array_equal(result.agent.state.actor.values, actor_before)
    assert np.array_equal(result.agent.state.critic1.values, state.agent.state.critic1.values)
    assert result.synthetic_transitions_used == 0
    assert result.policy_steps_done == 0


def test_adapt_forced_gate_failure_consumes_no_synthetic_data():
    state, _ = run_small(outer_iterations=4)
    rngs = rng_streams(12)
    task = envs.sample_task(envs.get_split("vel1d", "hard"), "test", rngs["sampling"])
    actor_before = state.agent.state.actor.values.copy()
    critic_before = state.agent.state.critic1.values.copy()
    cfg = adapt_cfg(gate_threshold=-np.inf)
    result = orch.adapt(state, task, cfg, rngs, horizon=50)
    assert not result.report.gate_passed
    assert result.synthetic_transitions_used == 0
    assert result.policy_steps_done == 0
    assert np.array_equal(state.agent.state.actor.values, actor_before)
    assert np.array_equal(state.agent.state.critic1.values, critic_before)


def test_adapt_open_gate_trains_policy_on_synthetic_mix():
    state, _ = run_small(outer_iterations=4)
    rngs = rng_streams(13)
    task = envs.sample_task(envs.get_split("vel1d", "hard"), "test", rngs["sampling"])
    actor_before = state.agent.state.actor.values.copy()
    cfg = adapt_cfg(gate_threshold=np.inf)  # force the gate open
    result = orch.adapt(state, task, cfg, rngs, horizon=50)
    assert result.report.gate_passed
    assert result.policy_steps_done == 8
    expected = 8 * (state.agent.cfg.batch_size - int(np.ceil(0.05 * state.agent.cfg.batch_size)))
    assert result.synthetic_transitions_used == expected
    # adapted policy comes back in the result; the meta-trained one is untouched
    assert not np.array_equal(result.agent.state.actor.values, actor_before)
    assert np.array_equal(state.agent.state.actor.values, actor_before)


def test_adapt_theta_updates_do_not_leak_into_state():
    state, _ = run_small(outer_iterations=4)
    rngs = rng_streams(14)
    theta_before = state.theta.values.copy()
    task = envs.sample_task(envs.get_split("vel1d", "hard"), "test", rngs["sampling"])
    result = orch.adapt(state, task, adapt_cfg(), rngs, horizon=50)
    assert np.array_equal(state.theta.values, theta_before)
    assert result.theta.values.shape == theta_before.shape


def test_family_adapt_defaults_match_protocol_table():
    assert orch.family_adapt_defaults("vel1d") == dict(
        adapt_points=200, n_fast=10, m_steps=100, relabel_mode="reward_only"
    )
    assert orch.family_adapt_defaults("dir2d") == dict(
        adapt_points=400, n_fast=20, m_steps=0, relabel_mode="reward_only"
    )
    assert orch.family_adapt_defaults("negated_actions") == dict(
        adapt_points=400, n_fast=10, m_steps=0, relabel_mode="full"
    )


def test_evaluate_deterministic_given_seed():
    state, _ = run_small(outer_iterations=3)
    split = envs.get_split("vel1d", "hard")
    tasks = [envs.sample_task(split, "train", np.random.default_rng(5)) for _ in range(2)]
    a = orch.evaluate(state.model, state.theta, state.phi, state.agent, tasks, 1, rng_streams(3), horizon=50)
    b = orch.evaluate(state.model, state.theta, state.phi, state.agent, tasks, 1, rng_streams(3), horizon=50)
    assert a == b
    assert len(a) == 2


def test_evaluate_requires_tasks():
    state, _ = run_small(outer_iterations=1)
    with pytest.raises(UsageError):
        orch.evaluate(state.model, state.theta, state.phi, state.agent, [], 1, rng_streams(0))


def test_meta_train_on_dynamics_varying_family():
    state, rows = run_small(family="negated_actions", split="default", outer_iterations=3)
    assert state.model.cfg.predict_state
    assert len(rows) == 3
    assert np.isfinite(rows[-1].model_meta_loss)
