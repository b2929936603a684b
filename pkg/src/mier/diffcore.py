"""Differentiable-computation core: networks, Gaussian losses, meta-gradients.

Parameters live in flat float64 vectors so gradients, optimizer state, and
checkpoints all share one layout (declaration order: per layer, weight matrix
row-major then bias). Two forward paths exist: a plain numpy one for rollouts
and a graph-building one for training; they compute identical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import NumericError, ShapeError, UsageError

LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_LOG_STD_BOUNDS = (-10.0, 2.0)

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkShape:
    """Architecture of a fully connected network with a linear output head."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ShapeError(f"all layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(d_in * d_out + d_out for d_in, d_out in self.layer_dims())


@dataclass
class ParamVector:
    """Flat float64 storage for one network's parameters."""

    values: np.ndarray
    shape: NetworkShape

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.shape.param_count():
            raise ShapeError(
                f"param vector length {self.values.size} != "
                f"required {self.shape.param_count()} for shape {self.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError("param vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.shape)


@dataclass
class ContextVector:
    """Latent task context, adapted by inner-loop gradient descent."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("context must be a flat vector")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("context contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.size

    def copy(self) -> "ContextVector":
        return ContextVector(self.values.copy())


@dataclass
class Gradient:
    """Gradient parts aligned with a ParamVector and/or a ContextVector."""

    wrt_params: Optional[np.ndarray] = None
    wrt_context: Optional[np.ndarray] = None

    def __post_init__(self):
        for part in (self.wrt_params, self.wrt_context):
            if part is not None and not np.all(np.isfinite(part)):
                raise NumericError("gradient contains non-finite entries")


@dataclass
class GaussianOutput:
    """Diagonal Gaussian head output; log_std is already clamped."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape != self.log_std.shape:
            raise ShapeError("mean and log_std must have equal shape")


def init_params(shape: NetworkShape, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, in declaration order."""
    chunks = []
    for d_in, d_out in shape.layer_dims():
        bound = np.sqrt(6.0 / (d_in + d_out))
        chunks.append(rng.uniform(-bound, bound, size=d_in * d_out))
        chunks.append(np.zeros(d_out))
    return ParamVector(np.concatenate(chunks), shape)


def zero_params(shape: NetworkShape) -> ParamVector:
    return ParamVector(np.zeros(shape.param_count()), shape)


# ---------------------------------------------------------------------------
# forward passes


def _check_input(shape: NetworkShape, x: np.ndarray, batched: bool):
    want = shape.input_dim
    got = x.shape[-1] if x.ndim else -1
    if (batched and x.ndim != 2) or (not batched and x.ndim != 1) or got != want:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {want}")


def forward_np(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Batched plain-numpy forward pass; rows are samples."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    _check_input(params.shape, x, batched=True)
    act = np.tanh if params.shape.activation == "tanh" else lambda h: np.maximum(h, 0.0)
    h = x
    offset = 0
    layers = params.shape.layer_dims()
    vals = params.values
    for i, (d_in, d_out) in enumerate(layers):
        w = vals[offset : offset + d_in * d_out].reshape(d_in, d_out)
        offset += d_in * d_out
        b = vals[offset : offset + d_out]
        offset += d_out
        h = h @ w + b
        if i < len(layers) - 1:
            h = act(h)
    return h[0] if single else h


def forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Network output for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params.shape, x, batched=False)
    return forward_np(params, x)


def forward_var(params: Var, shape: NetworkShape, x: Var) -> Var:
    """Graph-building forward pass; `params` is the flat parameter leaf."""
    act = ad.tanh if shape.activation == "tanh" else ad.relu
    h = x
    offset = 0
    layers = shape.layer_dims()
    for i, (d_in, d_out) in enumerate(layers):
        h = ad.dense(params, h, offset, d_in, d_out)
        offset += d_in * d_out + d_out
        if i < len(layers) - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# Gaussian negative log likelihood


def gaussian_nll(out: GaussianOutput, target: np.ndarray) -> float:
    """Summed per-dimension NLL of a diagonal Gaussian."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != out.mean.shape:
        raise ShapeError(f"target shape {target.shape} != mean shape {out.mean.shape}")
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(out.mean)) and np.all(np.isfinite(out.log_std))):
        raise NumericError("gaussian_nll received non-finite inputs")
    z = (target - out.mean) * np.exp(-out.log_std)
    return float(np.sum(out.log_std + 0.5 * LOG_2PI + 0.5 * z * z))


def gaussian_nll_var(mean: Var, log_std: Var, target: Var) -> Var:
    """Graph version; sums over all entries of the (possibly batched) target."""
    z = ad.mul(ad.sub(target, mean), ad.exp(ad.neg(log_std)))
    per_dim = ad.add(
        ad.add(log_std, ad.constant(0.5 * LOG_2PI)),
        ad.scale(ad.mul(z, z), 0.5),
    )
    return ad.sum_all(per_dim)


def gaussian_head_var(raw: Var, out_dim: int, log_std_bounds=DEFAULT_LOG_STD_BOUNDS) -> tuple[Var, Var]:
    """Split a (batch, 2*out_dim) head into mean and clamped log_std."""
    mean = ad.slice_cols(raw, 0, out_dim)
    log_std = ad.clamp(ad.slice_cols(raw, out_dim, 2 * out_dim), *log_std_bounds)
    return mean, log_std


def gaussian_head_np(raw: np.ndarray, out_dim: int, log_std_bounds=DEFAULT_LOG_STD_BOUNDS) -> GaussianOutput:
    mean = raw[..., :out_dim]
    log_std = np.clip(raw[..., out_dim : 2 * out_dim], *log_std_bounds)
    return GaussianOutput(mean, log_std)


# ---------------------------------------------------------------------------
# gradients

LossFn = Callable[[Var, Var], Var]  # (theta leaf, phi leaf) -> scalar Var


def grad(loss: LossFn, theta: ParamVector, phi: ContextVector) -> Gradient:
    """Exact reverse-mode gradient of a scalar loss at (theta, phi)."""
    t = ad.constant(theta.values)
    p = ad.constant(phi.values)
    out = loss(t, p)
    gt, gp = ad.backward(out, [t, p])
    return Gradient(wrt_params=gt.value.copy(), wrt_context=gp.value.copy())


def context_descent(
    inner_loss: LossFn,
    theta_leaf: Var,
    phi_leaf: Var,
    alpha: float,
    k: int,
    mode: str = "exact",
) -> Var:
    """Unroll k gradient steps on the context, returning phi_k as a Var.

    In exact mode the produced graph keeps the dependence of each step on
    (theta, phi), so differentiating through it yields true second-order
    terms. In first_order mode each update term is detached and acts as a
    constant offset.
    """
    if k < 0:
        raise UsageError("inner step count k must be >= 0")
    if alpha < 0:
        raise UsageError("inner learning rate must be >= 0")
    if mode not in ("exact", "first_order"):
        raise UsageError(f"unknown meta-gradient mode {mode!r}")
    phi_j = phi_leaf
    for j in range(k):
        loss_j = inner_loss(theta_leaf, phi_j)
        if not np.isfinite(loss_j.value):
            raise NumericError(f"inner loss became non-finite at step {j}")
        (g_phi,) = ad.backward(loss_j, [phi_j])
        if mode == "first_order":
            g_phi = ad.detach(g_phi)
        phi_j = ad.sub(phi_j, ad.scale(g_phi, alpha))
        if not np.all(np.isfinite(phi_j.value)):
            raise NumericError(f"context became non-finite after inner step {j}")
    return phi_j


def meta_grad(
    inner_loss: LossFn,
    outer_loss: LossFn,
    theta: ParamVector,
    phi: ContextVector,
    alpha: float,
    k: int,
    mode: str = "exact",
) -> tuple[float, Gradient]:
    """Value and gradient of outer_loss(theta, phi_k) where phi_k comes from
    k inner descent steps of inner_loss on the context only."""
    t = ad.constant(theta.values)
    p = ad.constant(phi.values)
    phi_k = context_descent(inner_loss, t, p, alpha, k, mode)
    out = outer_loss(t, phi_k)
    gt, gp = ad.backward(out, [t, p])
    return float(out.value), Gradient(wrt_params=gt.value.copy(), wrt_context=gp.value.copy())


# ---------------------------------------------------------------------------
# Adam, shared by every training loop


@dataclass
class AdamState:
    """Per-parameter-vector Adam moments."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, values: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(values), np.zeros_like(values))


@dataclass
class Adam:
    """Deterministic float64 Adam with the usual constants."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(default=None)  # type: ignore[assignment]

    def step(self, values: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = AdamState.like(values)
        s = self.state
        s.t += 1
        s.m = self.beta1 * s.m + (1.0 - self.beta1) * gradient
        s.v = self.beta2 * s.v + (1.0 - self.beta2) * gradient * gradient
        m_hat = s.m / (1.0 - self.beta1**s.t)
        v_hat = s.v / (1.0 - self.beta2**s.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradient_norm(parts: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Jointly rescale gradient parts so their combined L2 norm <= max_norm."""
    total = float(np.sqrt(sum(float(np.dot(p.ravel(), p.ravel())) for p in parts)))
    if total <= max_norm or total == 0.0:
        return [p.copy() for p in parts], total
    factor = max_norm / total
    return [p * factor for p in parts], total
