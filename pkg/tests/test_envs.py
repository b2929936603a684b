"""Environment families: analytic rewards, splits, determinism."""

import numpy as np
import pytest

from mier import envs
from mier.envs import EnvState, TaskSpec
from mier.errors import ConfigError, UsageError


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# task sampling and splits


def test_vel1d_hard_split_supports():
    split = envs.get_split("vel1d", "hard")
    r = rng(1)
    for _ in range(200):
        t = envs.sample_task(split, "train", r)
        assert 0.0 <= t.params[0] <= 1.5 and not t.ood
        t = envs.sample_task(split, "test", r)
        assert 2.5 <= t.params[0] <= 3.0 and t.ood


def test_vel1d_medium_split_supports():
    split = envs.get_split("vel1d", "medium")
    r = rng(2)
    ts = [envs.sample_task(split, "train", r).params[0] for _ in range(500)]
    assert min(ts) >= 0.0 and max(ts) <= 2.5


def test_dir2d_split_supports():
    split = envs.get_split("dir2d", "default")
    r = rng(3)
    for _ in range(200):
        assert 0.0 <= envs.sample_task(split, "train", r).params[0] <= 1.5 * np.pi
        a = envs.sample_task(split, "test", r).params[0]
        assert 1.5 * np.pi <= a <= 2.0 * np.pi


def test_negated_actions_masks():
    split = envs.get_split("negated_actions", "default")
    r = rng(4)
    for _ in range(100):
        train = envs.sample_task(split, "train", r)
        assert train.params[3] == 1.0
        test = envs.sample_task(split, "test", r)
        assert test.params[3] == -1.0
    train_set = envs.enumerate_tasks(split, "train", 0, r)
    test_set = envs.enumerate_tasks(split, "test", 0, r)
    assert len(train_set) == 8 and len(test_set) == 8
    assert len({tuple(t.params) for t in train_set + test_set}) == 16


def test_split_disjointness_over_many_samples():
    r = rng(5)
    for family, name in [("vel1d", "hard"), ("dir2d", "default"), ("negated_actions", "default"), ("rand_params", "default")]:
        split = envs.get_split(family, name)
        for _ in range(10_000):
            t = envs.sample_task(split, "test", r)
            assert not envs.in_train_support(split, t), (family, t.params)


def test_unknown_split_rejected():
    with pytest.raises(ConfigError):
        envs.get_split("vel1d", "bogus")


# ---------------------------------------------------------------------------
# reset


def test_reset_time_and_box():
    r = rng(6)
    for family in envs.FAMILIES:
        split_name = "hard" if family == "vel1d" else "default"
        task = envs.sample_task(envs.get_split(family, split_name), "train", r)
        for _ in range(200):
            st = envs.reset(task, r)
            assert st.t == 0
            assert np.all(np.abs(st.observation) <= envs.INIT_NOISE)
        # velocities start at rest so rollout returns are analytic
        state_dim, _ = envs.family_dims(family)
        st = envs.reset(task, r)
        assert np.all(st.observation[state_dim // 2 :] == 0.0)


def test_reset_seeded_determinism():
    task = TaskSpec("vel1d", np.array([1.0]))
    a = envs.reset(task, rng(7)).observation
    b = envs.reset(task, rng(7)).observation
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# step dynamics


def test_vel1d_at_target_zero_reward():
    task = TaskSpec("vel1d", np.array([1.0]))
    st = EnvState(np.array([0.0, 1.0]), t=0)
    _, reward, _ = envs.step(task, st, np.array([0.0]))
    assert reward == 0.0


def test_vel1d_velocity_clamp():
    task = TaskSpec("vel1d", np.array([1.0]))
    st = EnvState(np.array([0.0, envs.V_MAX]), t=0)
    nxt, _, _ = envs.step(task, st, np.array([1.0]))
    assert nxt.observation[1] == envs.V_MAX


def test_negated_identity_mask_matches_unmasked():
    identity = TaskSpec("negated_actions", np.ones(4))
    st = EnvState(np.zeros(8), t=0)
    a = np.array([0.5, -0.25, 1.0, -1.0])
    nxt, reward, _ = envs.step(identity, st, a)
    vel = np.clip(envs.DT * a, -envs.V_MAX, envs.V_MAX)
    assert np.array_equal(nxt.observation[4:], vel)
    assert reward == pytest.approx(float(vel @ np.full(4, 0.5)))


def test_negated_mask_flips_effective_action():
    mask = np.array([1.0, 1.0, 1.0, -1.0])
    task = TaskSpec("negated_actions", mask)
    st = EnvState(np.zeros(8), t=0)
    a = np.ones(4)
    nxt, _, _ = envs.step(task, st, a)
    assert nxt.observation[4 + 3] == pytest.approx(-envs.DT)


def test_dir2d_reward_upper_bound_attained():
    # Moving along the target direction at the speed cap hits the bound.
    angle = 0.7
    task = TaskSpec("dir2d", np.array([angle]))
    u = np.array([np.cos(angle), np.sin(angle)])
    st = EnvState(np.concatenate([np.zeros(2), envs.V_MAX * u]), t=0)
    _, reward, _ = envs.step(task, st, u)  # keeps pushing; norm clamp holds speed
    assert reward == pytest.approx(envs.per_step_reward_bound("dir2d"), abs=1e-9)
    r = rng(8)
    for _ in range(500):
        st = EnvState(np.concatenate([np.zeros(2), r.uniform(-3, 3, 2)]), t=0)
        _, reward, _ = envs.step(task, st, r.uniform(-1, 1, 2))
        assert reward <= envs.per_step_reward_bound("dir2d") + 1e-12


def test_rand_params_gain_scales_action_effect():
    task = TaskSpec("rand_params", np.array([0.5, 1.5]))
    st = EnvState(np.zeros(4), t=0)
    nxt, _, _ = envs.step(task, st, np.array([1.0, 1.0]))
    assert np.allclose(nxt.observation[2:], [0.05, 0.15])


def test_reward_only_families_share_dynamics():
    r = rng(9)
    for family, name in [("vel1d", "hard"), ("dir2d", "default")]:
        split = envs.get_split(family, name)
        t1 = envs.sample_task(split, "train", r)
        t2 = envs.sample_task(split, "test", r)
        state_dim, action_dim = envs.family_dims(family)
        for _ in range(50):
            obs = r.uniform(-1, 1, state_dim)
            a = r.uniform(-1, 1, action_dim)
            n1, _, _ = envs.step(t1, EnvState(obs.copy(), 0), a)
            n2, _, _ = envs.step(t2, EnvState(obs.copy(), 0), a)
            assert np.array_equal(n1.observation, n2.observation)


def test_step_after_done_rejected():
    task = TaskSpec("vel1d", np.array([1.0]))
    st = EnvState(np.zeros(2), t=200)
    with pytest.raises(UsageError):
        envs.step(task, st, np.zeros(1))


def test_episode_length_exact_and_done_only_at_end():
    task = TaskSpec("vel1d", np.array([1.0]))
    st = envs.reset(task, rng(10))
    dones = []
    for _ in range(envs.DEFAULT_HORIZON):
        st, _, done = envs.step(task, st, np.array([0.3]))
        dones.append(done)
    assert dones[-1] and not any(dones[:-1])


# ---------------------------------------------------------------------------
# rollout


def test_rollout_zero_policy_vel1d():
    task = TaskSpec("vel1d", np.array([1.0]))
    data, ret = envs.rollout(task, lambda obs: np.zeros(1), rng=rng(11))
    assert len(data) == 200
    assert ret == pytest.approx(-200.0, abs=1e-12)


def test_rollout_constant_reward_sum():
    # negated_actions with full-forward velocity: after ramp, reward is constant.
    task = TaskSpec("negated_actions", np.ones(4))
    _, ret3 = envs.rollout(task, lambda obs: np.ones(4), horizon=3, rng=rng(12))
    # velocities ramp 0.1 per dim per step; readout 0.5 each: rewards 0.2, 0.4, 0.6
    assert ret3 == pytest.approx(1.2, abs=1e-12)


def test_rollout_deterministic_given_seed():
    task = TaskSpec("dir2d", np.array([0.3]))

    def policy(obs):
        return np.array([0.7, -0.2])

    d1, r1 = envs.rollout(task, policy, rng=rng(13))
    d2, r2 = envs.rollout(task, policy, rng=rng(13))
    assert r1 == r2
    assert np.array_equal(d1.states, d2.states)
    assert np.array_equal(d1.rewards, d2.rewards)


def test_scripted_oracle_ramp_cost():
    task = TaskSpec("vel1d", np.array([1.0]))
    data, ret = envs.rollout(task, envs.scripted_vel1d_policy(1.0), rng=rng(14))
    expected = envs.vel1d_oracle_return(1.0)
    assert expected == pytest.approx(-4.5, abs=1e-12)
    assert ret == pytest.approx(expected, abs=1e-9)
    assert ret >= -5.0


def test_transitions_carry_step_indices():
    task = TaskSpec("vel1d", np.array([0.5]))
    data, _ = envs.rollout(task, lambda obs: np.array([1.0]), horizon=5, rng=rng(15))
    assert list(data.step_indices) == [0, 1, 2, 3, 4]
