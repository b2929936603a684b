"""SAC: action range, target bookkeeping, loss behavior, FD oracle."""

import numpy as np
import pytest

from mier import autodiff as ad
from mier import diffcore as dc
from mier.errors import UsageError
from mier.policy import SacAgent, SacBatch, SacConfig, discounted_return, squashed_gaussian_np


def make_agent(state_dim=2, action_dim=1, d_ctx=3, seed=0, **cfg_kw):
    cfg_kw.setdefault("hidden_dims", (16, 16))
    cfg = SacConfig(**cfg_kw)
    return SacAgent(cfg, state_dim, action_dim, d_ctx, np.random.default_rng(seed))


def make_batch(rng, n, state_dim=2, action_dim=1, d_ctx=3, rewards=None):
    return SacBatch(
        states=rng.normal(size=(n, state_dim)),
        actions=rng.uniform(-1, 1, size=(n, action_dim)),
        rewards=rng.normal(size=n) if rewards is None else rewards,
        next_states=rng.normal(size=(n, state_dim)),
        contexts=rng.normal(size=(n, d_ctx)),
    )


def set_constant_critic(agent, c):
    """Zero both critics except the output bias, making Q(s, a, phi) == c."""
    for name in ("critic1", "critic2", "target1", "target2"):
        params = getattr(agent.state, name)
        values = np.zeros_like(params.values)
        values[-1] = c
        setattr(agent.state, name, dc.ParamVector(values, params.shape))


# ---------------------------------------------------------------------------
# act


def test_act_mean_mode_deterministic():
    agent = make_agent()
    obs, phi = np.array([0.3, -0.1]), np.zeros(3)
    a1 = agent.act(obs, phi, mode="mean")
    a2 = agent.act(obs, phi, mode="mean")
    assert np.array_equal(a1, a2)


def test_act_always_strictly_inside_unit_box():
    agent = make_agent(action_dim=2)
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = agent.act(rng.normal(size=2), rng.normal(size=3), mode="sample", rng=rng)
        assert np.all(a > -1.0) and np.all(a < 1.0)
    # saturated pre-tanh values still stay strictly inside
    big = dc.ParamVector(np.zeros_like(agent.state.actor.values), agent.state.actor.shape)
    vals = big.values.copy()
    vals[-4:-2] = 50.0  # mean-head biases
    agent.state.actor = dc.ParamVector(vals, big.shape)
    a = agent.act(np.zeros(2), np.zeros(3), mode="mean")
    assert np.all(a < 1.0) and np.all(a > -1.0)


def test_act_sample_range_property():
    agent = make_agent(action_dim=3)
    rng = np.random.default_rng(2)
    draws = np.stack([agent.act(np.zeros(2), np.zeros(3), rng=rng) for _ in range(10_000)])
    assert np.all(draws > -1.0) and np.all(draws < 1.0)


def test_act_fixed_seed_replay():
    agent = make_agent()
    obs, phi = np.array([0.5, 0.5]), np.array([0.1, 0.2, 0.3])
    a1 = agent.act(obs, phi, rng=np.random.default_rng(7))
    a2 = agent.act(obs, phi, rng=np.random.default_rng(7))
    assert np.array_equal(a1, a2)


def test_act_golden_replay():
    agent = make_agent(seed=11)
    a = agent.act(np.array([0.25, -0.75]), np.array([0.0, 0.5, -0.5]), rng=np.random.default_rng(3))
    assert a[0].hex() == np.float64(0.9598910057593665).hex()


# ---------------------------------------------------------------------------
# critic update


def test_critic_target_degenerate_discount_is_scaled_reward():
    # gamma -> 0 not allowed by config, but the target formula is additive;
    # check via temperature=0 and constant critics that only r and gamma*c enter.
    agent = make_agent(temperature=0.0, reward_scale=2.0, discount=0.5)
    set_constant_critic(agent, 0.0)
    rng = np.random.default_rng(4)
    batch = make_batch(rng, 8)
    before1 = agent.state.critic1.values.copy()
    agent.critic_update(batch, rng)
    assert not np.array_equal(agent.state.critic1.values, before1)
    # with constant-zero targets the regression target is exactly 2*r:
    # verify by fitting a fresh graph loss at the pre-update parameters
    x = np.concatenate([batch.states, batch.actions, batch.contexts], axis=1)
    q = dc.forward_np(dc.ParamVector(before1, agent.state.critic1.shape), x)[:, 0]
    expected_loss = float(np.mean((q - 2.0 * batch.rewards) ** 2))
    agent2 = make_agent(temperature=0.0, reward_scale=2.0, discount=0.5)
    set_constant_critic(agent2, 0.0)
    agent2.state = agent2.state  # unchanged
    _, (l1, _) = agent2.critic_update(make_batch(np.random.default_rng(4), 8), np.random.default_rng(4))
    assert l1 == pytest.approx(expected_loss, rel=1e-9)


def test_hard_target_copy_with_tau_one():
    agent = make_agent(target_update_rate=1.0)
    rng = np.random.default_rng(5)
    agent.critic_update(make_batch(rng, 8), rng)
    assert np.array_equal(agent.state.target1.values, agent.state.critic1.values)
    assert np.array_equal(agent.state.target2.values, agent.state.critic2.values)


def test_soft_update_exactness():
    tau = 0.25
    agent = make_agent(target_update_rate=tau)
    rng = np.random.default_rng(6)
    old_t1 = agent.state.target1.values.copy()
    agent.critic_update(make_batch(rng, 8), rng)
    expected = (1.0 - tau) * old_t1 + tau * agent.state.critic1.values
    assert np.array_equal(agent.state.target1.values, expected)


def test_target_update_respects_interval():
    agent = make_agent(target_update_interval=3)
    rng = np.random.default_rng(7)
    t0 = agent.state.target1.values.copy()
    agent.critic_update(make_batch(rng, 8), rng)
    agent.critic_update(make_batch(rng, 8), rng)
    assert np.array_equal(agent.state.target1.values, t0)
    agent.critic_update(make_batch(rng, 8), rng)
    assert not np.array_equal(agent.state.target1.values, t0)


def test_critic_loss_decreases_on_frozen_batch():
    agent = make_agent(temperature=0.0)
    rng = np.random.default_rng(8)
    batch = make_batch(rng, 32)
    losses = []
    for _ in range(100):
        _, (l1, l2) = agent.critic_update(batch, np.random.default_rng(0))
        losses.append(l1 + l2)
    assert losses[-1] < losses[0]


def test_zero_rewards_contract_q_toward_zero():
    # Discounted bootstrapping with zero rewards shrinks large Q values on a
    # trajectory-coherent frozen buffer (next states reappear as states).
    from mier import envs

    agent = make_agent(temperature=0.0, target_update_rate=0.05)
    for name in ("critic1", "critic2", "target1", "target2"):
        p = getattr(agent.state, name)
        v = p.values.copy()
        v[-1] = 5.0
        setattr(agent.state, name, dc.ParamVector(v, p.shape))
    rng = np.random.default_rng(3)
    data, _ = envs.rollout(envs.TaskSpec("vel1d", np.array([1.0])), lambda obs: rng.uniform(-1, 1, 1), rng=rng, horizon=64)
    batch = SacBatch(
        states=data.states,
        actions=data.actions,
        rewards=np.zeros(len(data)),
        next_states=data.next_states,
        contexts=np.zeros((len(data), 3)),
    )
    x = np.concatenate([batch.states, batch.actions, batch.contexts], axis=1)

    def q_norm():
        q1 = dc.forward_np(agent.state.critic1, x)[:, 0]
        q2 = dc.forward_np(agent.state.critic2, x)[:, 0]
        return float(np.mean(np.abs(q1)) + np.mean(np.abs(q2)))

    before = q_norm()
    for _ in range(600):
        agent.critic_update(batch, np.random.default_rng(1))
    after = q_norm()
    assert after < 0.8 * before


# ---------------------------------------------------------------------------
# actor update


def test_actor_constant_critic_zero_gradient():
    c = 1.5
    agent = make_agent(temperature=0.0)
    set_constant_critic(agent, c)
    rng = np.random.default_rng(10)
    batch = make_batch(rng, 16)
    eps = np.zeros((16, 1))
    leaf = ad.constant(agent.state.actor.values)
    loss = agent._actor_loss_graph(leaf, batch, eps)
    (g,) = ad.backward(loss, [leaf])
    assert loss.value == pytest.approx(-c, abs=1e-12)
    assert np.allclose(g.value, 0.0, atol=1e-12)


def test_actor_loss_finite_at_random_init():
    agent = make_agent()
    rng = np.random.default_rng(11)
    _, loss = agent.actor_update(make_batch(rng, 16), rng)
    assert np.isfinite(loss)


def test_actor_gradient_matches_fd_on_tiny_instance():
    from test_diffcore import fd_gradient, max_rel_err

    agent = make_agent(state_dim=1, action_dim=1, d_ctx=1, hidden_dims=(4,), seed=3)
    rng = np.random.default_rng(12)
    batch = make_batch(rng, 6, state_dim=1, action_dim=1, d_ctx=1)
    eps = rng.standard_normal((6, 1))
    leaf = ad.constant(agent.state.actor.values)
    loss = agent._actor_loss_graph(leaf, batch, eps)
    (g,) = ad.backward(loss, [leaf])

    def f(values):
        return agent._actor_loss_graph(ad.constant(values), batch, eps).value

    fd = fd_gradient(f, agent.state.actor.values)
    assert max_rel_err(g.value, fd) < 1e-4


def test_actor_gradient_sign_invariant_to_critic_scale():
    agent = make_agent(state_dim=1, action_dim=1, d_ctx=1, hidden_dims=(4,), temperature=0.0, seed=5)
    rng = np.random.default_rng(13)
    batch = make_batch(rng, 8, state_dim=1, action_dim=1, d_ctx=1)
    eps = rng.standard_normal((8, 1))

    def actor_grad():
        leaf = ad.constant(agent.state.actor.values)
        (g,) = ad.backward(agent._actor_loss_graph(leaf, batch, eps), [leaf])
        return g.value

    g1 = actor_grad()
    for name in ("critic1", "critic2"):
        params = getattr(agent.state, name)
        scaled = params.values.copy()
        n_out_w = 4  # last hidden width
        scaled[-(n_out_w + 1):] *= 3.0  # scale output layer: Q -> 3Q
        setattr(agent.state, name, dc.ParamVector(scaled, params.shape))
    g3 = actor_grad()
    mask = np.abs(g1) > 1e-10
    assert np.all(np.sign(g1[mask]) == np.sign(g3[mask]))


# ---------------------------------------------------------------------------
# discounted return


def test_discounted_return_analytic():
    assert discounted_return([1.0, 1.0, 1.0], 0.99) == pytest.approx(2.9701, abs=1e-12)


def test_discounted_return_gamma_one_is_sum():
    assert discounted_return([1.0, -2.0, 0.5], 1.0) == pytest.approx(-0.5)


def test_discounted_return_empty():
    assert discounted_return([], 0.9) == 0.0


def test_discounted_return_bad_gamma():
    with pytest.raises(UsageError):
        discounted_return([1.0], 0.0)


# ---------------------------------------------------------------------------
# squashed gaussian helper


def test_squashed_log_prob_matches_change_of_variables():
    rng = np.random.default_rng(14)
    agent = make_agent(action_dim=2)
    obs_ctx = rng.normal(size=(5, 5))
    eps = rng.standard_normal((5, 2))
    a, logp = squashed_gaussian_np(agent.state.actor, obs_ctx, 2, (-10, 2), eps)
    raw = dc.forward_np(agent.state.actor, obs_ctx)
    mean, log_std = raw[:, :2], np.clip(raw[:, 2:], -10, 2)
    u = mean + np.exp(log_std) * eps
    base = np.sum(-log_std - 0.5 * np.log(2 * np.pi) - 0.5 * eps**2, axis=1)
    jac = np.sum(np.log(1.0 - np.tanh(u) ** 2), axis=1)
    assert np.allclose(logp, base - jac, atol=1e-9)
