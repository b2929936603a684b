"""Context-conditioned probabilistic dynamics-and-reward model.

The model maps (state, action, context) to a diagonal Gaussian over its
prediction target. With state prediction enabled the target is the state
delta (next_state - state) concatenated with the reward; in reward-only mode
the target is just the reward. Adaptation touches only the context vector;
meta-training differentiates through those context steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import diffcore as dc
from .autodiff import Var
from .diffcore import Adam, ContextVector, Gradient, NetworkShape, ParamVector
from .errors import NumericError, ShapeError, UsageError

CONTINUED_ADAPT_SPLIT_SEED = 0x5EED5


@dataclass(frozen=True)
class Transition:
    """One environment step."""

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    step_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=np.float64))
        object.__setattr__(self, "action", np.asarray(self.action, dtype=np.float64))
        object.__setattr__(self, "next_state", np.asarray(self.next_state, dtype=np.float64))
        if not (
            np.all(np.isfinite(self.state))
            and np.all(np.isfinite(self.action))
            and np.all(np.isfinite(self.next_state))
            and np.isfinite(self.reward)
        ):
            raise NumericError("transition contains non-finite entries")
        if self.step_index < 0:
            raise UsageError("step_index must be non-negative")


class Dataset:
    """Column-stacked transitions with homogeneous dimensions."""

    __slots__ = ("states", "actions", "next_states", "rewards", "step_indices")

    def __init__(self, states, actions, next_states, rewards, step_indices=None):
        self.states = np.ascontiguousarray(states, dtype=np.float64)
        self.actions = np.ascontiguousarray(actions, dtype=np.float64)
        self.next_states = np.ascontiguousarray(next_states, dtype=np.float64)
        self.rewards = np.ascontiguousarray(rewards, dtype=np.float64)
        n = len(self.rewards)
        if step_indices is None:
            step_indices = np.zeros(n, dtype=np.int64)
        self.step_indices = np.ascontiguousarray(step_indices, dtype=np.int64)
        if not (
            self.states.shape[0] == self.actions.shape[0] == self.next_states.shape[0] == n == len(self.step_indices)
        ):
            raise ShapeError("dataset columns disagree on length")
        if self.states.shape != self.next_states.shape:
            raise ShapeError("state and next_state dims disagree")

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Dataset":
        if not transitions:
            return cls(
                np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=np.int64)
            )
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.stack([t.next_state for t in transitions]),
            np.array([t.reward for t in transitions]),
            np.array([t.step_index for t in transitions], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.rewards)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.states[i], self.actions[i], self.next_states[i], float(self.rewards[i]), int(self.step_indices[i])
        )

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.states[idx], self.actions[idx], self.next_states[idx], self.rewards[idx], self.step_indices[idx]
        )

    @staticmethod
    def concat(parts: Iterable["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise UsageError("cannot concatenate empty datasets")
        return Dataset(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.actions for p in parts]),
            np.concatenate([p.next_states for p in parts]),
            np.concatenate([p.rewards for p in parts]),
            np.concatenate([p.step_indices for p in parts]),
        )


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    d_ctx: int = 5
    predict_state: bool = True
    predict_delta: bool = True
    inner_lr: float = 0.01
    inner_steps: int = 2
    meta_batch_size: int = 10
    hidden_dims: tuple[int, ...] = (64, 64)
    log_std_bounds: tuple[float, float] = dc.DEFAULT_LOG_STD_BOUNDS

    @property
    def target_dim(self) -> int:
        return self.state_dim + 1 if self.predict_state else 1

    def network_shape(self) -> NetworkShape:
        return NetworkShape(
            input_dim=self.state_dim + self.action_dim + self.d_ctx,
            hidden_dims=tuple(self.hidden_dims),
            output_dim=2 * self.target_dim,
            activation="relu",
        )


@dataclass
class AdaptReport:
    steps_taken: int
    loss_before: float
    loss_after: float
    val_loss: Optional[float] = None
    gate_passed: bool = False


class Normalizer:
    """Running mean/std of network inputs; frozen once adaptation starts."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"normalizer expected (n, {self.dim}) rows")
        for row in rows:  # Welford, order-stable
            self.count += 1.0
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return np.sqrt(np.maximum(self.m2 / self.count, 1e-12))

    def transform(self, rows: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(rows, dtype=np.float64)
        return (rows - self.mean) / self.std()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "norm_mean": self.mean.copy(),
            "norm_m2": self.m2.copy(),
            "norm_count": np.array([self.count]),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.mean = np.asarray(arrays["norm_mean"], dtype=np.float64).copy()
        self.m2 = np.asarray(arrays["norm_m2"], dtype=np.float64).copy()
        self.count = float(np.asarray(arrays["norm_count"]).ravel()[0])


class DynamicsModel:
    """Stateless-parameter model: theta/phi are passed in, never stored here."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.shape = cfg.network_shape()
        self.normalizer = Normalizer(cfg.state_dim + cfg.action_dim)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return dc.init_params(self.shape, rng)

    def init_context(self, rng: np.random.Generator) -> ContextVector:
        return ContextVector(0.1 * rng.standard_normal(self.cfg.d_ctx))

    # -- batch plumbing ----------------------------------------------------

    def _check_batch(self, batch: Dataset):
        if len(batch) == 0:
            raise UsageError("batch must be non-empty")
        if batch.states.shape[1] != self.cfg.state_dim or batch.actions.shape[1] != self.cfg.action_dim:
            raise ShapeError(
                f"batch dims {batch.states.shape[1]}/{batch.actions.shape[1]} do not match "
                f"model dims {self.cfg.state_dim}/{self.cfg.action_dim}"
            )

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.normalizer.transform(np.concatenate([states, actions], axis=1))

    def _targets(self, batch: Dataset) -> np.ndarray:
        r = batch.rewards[:, None]
        if not self.cfg.predict_state:
            return r
        if self.cfg.predict_delta:
            return np.concatenate([batch.next_states - batch.states, r], axis=1)
        return np.concatenate([batch.next_states, r], axis=1)

    def nll_loss_fn(self, batch: Dataset) -> dc.LossFn:
        """Mean-over-batch NLL as a (theta, phi) graph builder."""
        self._check_batch(batch)
        x = ad.constant(self._inputs(batch.states, batch.actions))
        y = ad.constant(self._targets(batch))
        n = len(batch)
        out_dim = self.cfg.target_dim
        bounds = self.cfg.log_std_bounds

        def loss(theta: Var, phi: Var) -> Var:
            inp = ad.concat_cols([x, ad.broadcast_rows(phi, n)])
            raw = dc.forward_var(theta, self.shape, inp)
            mean, log_std = dc.gaussian_head_var(raw, out_dim, bounds)
            return ad.scale(dc.gaussian_nll_var(mean, log_std, y), 1.0 / n)

        return loss

    # -- spec operations ----------------------------------------------------

    def model_nll(self, theta: ParamVector, phi: ContextVector, batch: Dataset) -> float:
        loss = self.nll_loss_fn(batch)
        value = loss(ad.constant(theta.values), ad.constant(phi.values)).value
        return float(value)

    def adapt_context(
        self,
        theta: ParamVector,
        phi: ContextVector,
        d_adapt: Dataset,
        alpha: float | None = None,
        k: int | None = None,
    ) -> ContextVector:
        """k full-batch context-only descent steps; theta untouched."""
        alpha = self.cfg.inner_lr if alpha is None else alpha
        k = self.cfg.inner_steps if k is None else k
        loss = self.nll_loss_fn(d_adapt)
        phi_k = dc.context_descent(loss, ad.constant(theta.values), ad.constant(phi.values), alpha, k)
        return ContextVector(phi_k.value.copy())

    def meta_loss(
        self,
        theta: ParamVector,
        phi: ContextVector,
        d_adapt: Dataset,
        d_eval: Dataset,
        mode: str = "exact",
    ) -> tuple[float, Gradient]:
        """Post-adaptation eval NLL and its gradient through the inner steps."""
        inner = self.nll_loss_fn(d_adapt)
        outer = self.nll_loss_fn(d_eval)
        return dc.meta_grad(inner, outer, theta, phi, self.cfg.inner_lr, self.cfg.inner_steps, mode)

    def continued_adapt(
        self,
        theta: ParamVector,
        phi: ContextVector,
        d_adapt: Dataset,
        n_context_steps: int,
        m_full_steps: int,
        val_frac: float = 0.8,
        gate_threshold: float = -3.0,
        full_step_lr: float = 3e-4,
        context_grad_clip: float = 10.0,
    ) -> tuple[ParamVector, ContextVector, AdaptReport]:
        """Context-only steps, then first-order full-parameter fine-tuning,
        with a held-out validation gate deciding synthetic-data use.

        Far-off-distribution data can make plain fixed-step descent on the
        context run away; the test-time context steps therefore clip the
        gradient norm. The meta-training inner loop stays unclipped.
        """
        if not 0.0 < val_frac < 1.0:
            raise UsageError("val_frac must be in (0, 1)")
        if n_context_steps < 0 or m_full_steps < 0:
            raise UsageError("step counts must be >= 0")
        n = len(d_adapt)
        if n < 2:
            raise UsageError("continued_adapt needs at least 2 transitions")

        split_rng = np.random.default_rng(CONTINUED_ADAPT_SPLIT_SEED)
        perm = split_rng.permutation(n)
        n_train = int(np.ceil(val_frac * n))
        train = d_adapt.subset(perm[:n_train])
        val = d_adapt.subset(perm[n_train:])

        theta_v = theta.values.copy()
        phi_v = phi.values.copy()
        train_loss = self.nll_loss_fn(train)
        loss_before = float(train_loss(ad.constant(theta_v), ad.constant(phi_v)).value)

        for _ in range(n_context_steps):
            t_leaf = ad.constant(theta_v)
            p_leaf = ad.constant(phi_v)
            (g_phi,) = ad.backward(train_loss(t_leaf, p_leaf), [p_leaf])
            (clipped,), _ = dc.clip_gradient_norm([g_phi.value], context_grad_clip)
            phi_v = phi_v - self.cfg.inner_lr * clipped
            if not np.all(np.isfinite(phi_v)):
                raise NumericError("context became non-finite during continued adaptation")

        if m_full_steps > 0:
            opt = Adam(lr=full_step_lr)
            joint = np.concatenate([theta_v, phi_v])
            n_theta = theta_v.size
            for _ in range(m_full_steps):
                t_leaf = ad.constant(joint[:n_theta])
                p_leaf = ad.constant(joint[n_theta:])
                out = train_loss(t_leaf, p_leaf)
                gt, gp = ad.backward(out, [t_leaf, p_leaf])
                joint = opt.step(joint, np.concatenate([gt.value, gp.value]))
            theta_v = joint[:n_theta]
            phi_v = joint[n_theta:]

        loss_after = float(train_loss(ad.constant(theta_v), ad.constant(phi_v)).value)
        new_theta = ParamVector(theta_v, self.shape)
        new_phi = ContextVector(phi_v)
        if len(val) == 0:
            raise UsageError("dataset too small to hold out a validation split")
        val_loss = self.model_nll(new_theta, new_phi, val)
        report = AdaptReport(
            steps_taken=n_context_steps + m_full_steps,
            loss_before=loss_before,
            loss_after=loss_after,
            val_loss=val_loss,
            gate_passed=bool(val_loss < gate_threshold),
        )
        return new_theta, new_phi, report

    def predict(
        self,
        theta: ParamVector,
        phi: ContextVector,
        states: np.ndarray,
        actions: np.ndarray,
        stochastic: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Optional[np.ndarray], np.ndarray]:
        """One-step prediction. Returns (next_states, rewards); next_states is
        None in reward-only mode, where the caller keeps its own successor."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[1] != self.cfg.state_dim or actions.shape[1] != self.cfg.action_dim:
            raise UsageError("predict received mismatched state/action dims")
        ctx_rows = np.broadcast_to(phi.values, (states.shape[0], self.cfg.d_ctx))
        net_in = np.concatenate([self._inputs(states, actions), ctx_rows], axis=1)
        raw = dc.forward_np(ParamVector(theta.values, self.shape), net_in)
        out = dc.gaussian_head_np(raw, self.cfg.target_dim, self.cfg.log_std_bounds)
        draw = out.mean
        if stochastic:
            if rng is None:
                raise UsageError("stochastic prediction needs an rng")
            draw = out.mean + np.exp(out.log_std) * rng.standard_normal(out.mean.shape)
        if not self.cfg.predict_state:
            return None, draw[:, 0]
        state_part = draw[:, : self.cfg.state_dim]
        next_states = states + state_part if self.cfg.predict_delta else state_part
        return next_states, draw[:, -1]
