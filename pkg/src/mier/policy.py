"""Context-conditioned soft actor-critic.

The actor is a tanh-squashed diagonal Gaussian over actions, conditioned on
(state, context); twin critics score (state, action, context). Environments
here are fixed-horizon with no early termination, so every critic target
bootstraps (no done masking). Target networks move only through exact soft
updates: new = (1 - tau) * old + tau * critic, entry by entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffcore as dc
from .autodiff import Var
from .diffcore import Adam, NetworkShape, ParamVector
from .errors import NumericError, ShapeError, UsageError

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


@dataclass
class SacConfig:
    discount: float = 0.99
    lr: float = 3e-4
    target_update_rate: float = 0.005
    target_update_interval: int = 1
    temperature: float = 1.0
    reward_scale: float = 1.0
    batch_size: int = 256
    hidden_dims: tuple[int, ...] = (64, 64, 64)
    log_std_bounds: tuple[float, float] = (-10.0, 2.0)

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise UsageError("discount must be in (0, 1)")
        if not 0.0 < self.target_update_rate <= 1.0:
            raise UsageError("target update rate must be in (0, 1]")
        if self.target_update_interval < 1 or self.batch_size < 1:
            raise UsageError("interval and batch size must be positive")


@dataclass
class SacState:
    actor: ParamVector
    critic1: ParamVector
    critic2: ParamVector
    target1: ParamVector
    target2: ParamVector
    update_count: int = 0


@dataclass
class SacBatch:
    """Column arrays; contexts holds one row per transition."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    contexts: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        if not (self.states.shape[0] == self.actions.shape[0] == self.next_states.shape[0] == self.contexts.shape[0] == n):
            raise ShapeError("sac batch columns disagree on length")
        if n == 0:
            raise UsageError("sac batch must be non-empty")


def actor_shape(state_dim: int, action_dim: int, d_ctx: int, hidden: tuple[int, ...]) -> NetworkShape:
    return NetworkShape(state_dim + d_ctx, tuple(hidden), 2 * action_dim)


def critic_shape(state_dim: int, action_dim: int, d_ctx: int, hidden: tuple[int, ...]) -> NetworkShape:
    return NetworkShape(state_dim + action_dim + d_ctx, tuple(hidden), 1)


def squashed_gaussian_np(
    actor: ParamVector,
    obs_ctx: np.ndarray,
    action_dim: int,
    log_std_bounds: tuple[float, float],
    eps: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample (or take the mean of) the squashed policy; returns (a, log_prob).

    With eps=None the squashed mean is returned and log_prob is that of the
    mean point. Outputs are nudged strictly inside (-1, 1) if tanh saturates.
    """
    raw = dc.forward_np(actor, obs_ctx)
    mean = raw[..., :action_dim]
    log_std = np.clip(raw[..., action_dim:], *log_std_bounds)
    if eps is None:
        u = mean
        eps_eff = np.zeros_like(mean)
    else:
        u = mean + np.exp(log_std) * eps
        eps_eff = eps
    a = np.tanh(u)
    a = np.where(a >= 1.0, np.nextafter(1.0, 0.0), a)
    a = np.where(a <= -1.0, np.nextafter(-1.0, 0.0), a)
    gauss = -log_std - 0.5 * LOG_2PI - 0.5 * eps_eff * eps_eff
    corr = 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))
    log_prob = np.sum(gauss - corr, axis=-1)
    return a, log_prob


def discounted_return(rewards, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise UsageError("gamma must be in (0, 1]")
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * float(r)
        weight *= gamma
    return total


class SacAgent:
    """Owns SAC parameters plus their Adam moments; single-writer."""

    def __init__(self, cfg: SacConfig, state_dim: int, action_dim: int, d_ctx: int, rng: np.random.Generator):
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.d_ctx = d_ctx
        a_shape = actor_shape(state_dim, action_dim, d_ctx, cfg.hidden_dims)
        c_shape = critic_shape(state_dim, action_dim, d_ctx, cfg.hidden_dims)
        critic1 = dc.init_params(c_shape, rng)
        critic2 = dc.init_params(c_shape, rng)
        self.state = SacState(
            actor=dc.init_params(a_shape, rng),
            critic1=critic1,
            critic2=critic2,
            target1=critic1.copy(),
            target2=critic2.copy(),
        )
        self._opt_actor = Adam(lr=cfg.lr)
        self._opt_c1 = Adam(lr=cfg.lr)
        self._opt_c2 = Adam(lr=cfg.lr)

    # -- acting --------------------------------------------------------------

    def act(self, obs: np.ndarray, phi: np.ndarray, mode: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        if obs.shape != (self.state_dim,) or phi.shape != (self.d_ctx,):
            raise ShapeError("act received mismatched obs/context dims")
        if mode not in ("sample", "mean"):
            raise UsageError(f"unknown act mode {mode!r}")
        eps = None
        if mode == "sample":
            if rng is None:
                raise UsageError("sample mode needs an rng")
            eps = rng.standard_normal((1, self.action_dim))
        a, _ = squashed_gaussian_np(
            self.state.actor, np.concatenate([obs, phi])[None, :], self.action_dim, self.cfg.log_std_bounds, eps
        )
        return a[0]

    # -- updates ---------------------------------------------------------------

    def _critic_inputs(self, batch: SacBatch) -> np.ndarray:
        return np.concatenate([batch.states, batch.actions, batch.contexts], axis=1)

    def critic_update(self, batch: SacBatch, rng: np.random.Generator) -> tuple[SacState, tuple[float, float]]:
        cfg = self.cfg
        st = self.state
        # Bootstrapped soft target; next actions are fresh policy samples.
        next_in = np.concatenate([batch.next_states, batch.contexts], axis=1)
        eps = rng.standard_normal((len(batch.rewards), self.action_dim))
        a2, logp2 = squashed_gaussian_np(st.actor, next_in, self.action_dim, cfg.log_std_bounds, eps)
        tgt_in = np.concatenate([batch.next_states, a2, batch.contexts], axis=1)
        q1t = dc.forward_np(st.target1, tgt_in)[:, 0]
        q2t = dc.forward_np(st.target2, tgt_in)[:, 0]
        y = cfg.reward_scale * batch.rewards + cfg.discount * (np.minimum(q1t, q2t) - cfg.temperature * logp2)
        if not np.all(np.isfinite(y)):
            raise NumericError("critic target became non-finite")

        x = ad.constant(self._critic_inputs(batch))
        y_var = ad.constant(y[:, None])
        losses = []
        for params, opt, name in ((st.critic1, self._opt_c1, "critic1"), (st.critic2, self._opt_c2, "critic2")):
            leaf = ad.constant(params.values)
            q = dc.forward_var(leaf, params.shape, x)
            err = ad.sub(q, y_var)
            loss = ad.mean_all(ad.mul(err, err))
            (g,) = ad.backward(loss, [leaf])
            new_values = opt.step(params.values, g.value)
            setattr(st, name, ParamVector(new_values, params.shape))
            losses.append(float(loss.value))

        st.update_count += 1
        if st.update_count % cfg.target_update_interval == 0:
            tau = cfg.target_update_rate
            st.target1 = ParamVector((1.0 - tau) * st.target1.values + tau * st.critic1.values, st.target1.shape)
            st.target2 = ParamVector((1.0 - tau) * st.target2.values + tau * st.critic2.values, st.target2.shape)
        return st, (losses[0], losses[1])

    def _actor_loss_graph(self, actor_leaf: Var, batch: SacBatch, eps: np.ndarray) -> Var:
        cfg = self.cfg
        st = self.state
        obs_ctx = ad.constant(np.concatenate([batch.states, batch.contexts], axis=1))
        raw = dc.forward_var(actor_leaf, st.actor.shape, obs_ctx)
        mean = ad.slice_cols(raw, 0, self.action_dim)
        log_std = ad.clamp(ad.slice_cols(raw, self.action_dim, 2 * self.action_dim), *cfg.log_std_bounds)
        eps_c = ad.constant(eps)
        u = ad.add(mean, ad.mul(ad.exp(log_std), eps_c))
        a = ad.tanh(u)
        gauss = ad.add(ad.neg(log_std), ad.constant(-0.5 * LOG_2PI - 0.5 * eps * eps))
        corr = ad.scale(
            ad.sub(ad.sub(ad.constant(LOG_2), u), ad.softplus(ad.scale(u, -2.0))),
            2.0,
        )
        logp = ad.sum_axis(ad.sub(gauss, corr), axis=1, keepdims=True)
        q_in = ad.concat_cols([ad.constant(batch.states), a, ad.constant(batch.contexts)])
        q1 = dc.forward_var(ad.constant(st.critic1.values), st.critic1.shape, q_in)
        q2 = dc.forward_var(ad.constant(st.critic2.values), st.critic2.shape, q_in)
        qmin = ad.minimum(q1, q2)
        return ad.mean_all(ad.sub(ad.scale(logp, cfg.temperature), qmin))

    def actor_update(self, batch: SacBatch, rng: np.random.Generator) -> tuple[SacState, float]:
        eps = rng.standard_normal((len(batch.rewards), self.action_dim))
        leaf = ad.constant(self.state.actor.values)
        loss = self._actor_loss_graph(leaf, batch, eps)
        (g,) = ad.backward(loss, [leaf])
        new_values = self._opt_actor.step(self.state.actor.values, g.value)
        self.state.actor = ParamVector(new_values, self.state.actor.shape)
        return self.state, float(loss.value)

    def update(self, batch: SacBatch, rng: np.random.Generator) -> dict[str, float]:
        """One full SAC step: both critics, then the actor."""
        _, (c1, c2) = self.critic_update(batch, rng)
        _, a = self.actor_update(batch, rng)
        return {"critic1_loss": c1, "critic2_loss": c2, "actor_loss": a}

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        st = self.state
        return {
            "sac_actor": st.actor.values.copy(),
            "sac_critic1": st.critic1.values.copy(),
            "sac_critic2": st.critic2.values.copy(),
            "sac_target1": st.target1.values.copy(),
            "sac_target2": st.target2.values.copy(),
            "sac_update_count": np.array([float(st.update_count)]),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        st = self.state
        st.actor = ParamVector(np.asarray(arrays["sac_actor"]), st.actor.shape)
        st.critic1 = ParamVector(np.asarray(arrays["sac_critic1"]), st.critic1.shape)
        st.critic2 = ParamVector(np.asarray(arrays["sac_critic2"]), st.critic2.shape)
        st.target1 = ParamVector(np.asarray(arrays["sac_target1"]), st.target1.shape)
        st.target2 = ParamVector(np.asarray(arrays["sac_target2"]), st.target2.shape)
        st.update_count = int(np.asarray(arrays["sac_update_count"]).ravel()[0])
