"""Finite-difference oracle battery for the differentiation core.

Random tiny instances (at most 64 parameters, context dim at most 4) compare
reverse-mode gradients and exact meta-gradients against central differences.
Everything is seeded, so a passing battery is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import diffcore as dc

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - fd) / (np.abs(fd) + 1e-8)))


def _random_instance(rng: np.random.Generator):
    """A random tiny Gaussian-NLL loss over (theta, phi)."""
    d_ctx = int(rng.integers(1, 5))
    state_dim = int(rng.integers(1, 3))
    hidden = int(rng.integers(3, 5))
    # Smooth activations keep the composed map twice differentiable, so the
    # two-sided difference quotient is a valid oracle for second-order paths.
    shape = dc.NetworkShape(state_dim + d_ctx, (hidden,), 2, activation="tanh")
    assert shape.param_count() <= 64
    theta = dc.ParamVector(0.5 * rng.standard_normal(shape.param_count()), shape)
    phi = dc.ContextVector(0.5 * rng.standard_normal(d_ctx))
    batch = int(rng.integers(4, 9))
    x = rng.standard_normal((batch, state_dim))
    y = rng.standard_normal((batch, 1))

    def loss(t: ad.Var, p: ad.Var) -> ad.Var:
        inp = ad.concat_cols([ad.constant(x), ad.broadcast_rows(p, batch)])
        raw = dc.forward_var(t, shape, inp)
        mean, log_std = dc.gaussian_head_var(raw, 1)
        return ad.scale(dc.gaussian_nll_var(mean, log_std, ad.constant(y)), 1.0 / batch)

    return loss, theta, phi


def _check_plain_grad(rng: np.random.Generator) -> float:
    loss, theta, phi = _random_instance(rng)
    g = dc.grad(loss, theta, phi)
    fd_t = fd_gradient(lambda v: float(loss(ad.constant(v), ad.constant(phi.values)).value), theta.values)
    fd_p = fd_gradient(lambda v: float(loss(ad.constant(theta.values), ad.constant(v)).value), phi.values)
    return max(relative_error(g.wrt_params, fd_t), relative_error(g.wrt_context, fd_p))


def _check_meta_grad(rng: np.random.Generator, k: int) -> float:
    loss, theta, phi = _random_instance(rng)
    alpha = float(rng.uniform(0.01, 0.1))
    _, g = dc.meta_grad(loss, loss, theta, phi, alpha, k, mode="exact")

    def composed(tv: np.ndarray, pv: np.ndarray) -> float:
        t = ad.constant(tv)
        p = ad.constant(pv)
        phi_k = dc.context_descent(loss, t, p, alpha, k)
        return float(loss(t, phi_k).value)

    fd_t = fd_gradient(lambda v: composed(v, phi.values), theta.values)
    fd_p = fd_gradient(lambda v: composed(theta.values, v), phi.values)
    return max(relative_error(g.wrt_params, fd_t), relative_error(g.wrt_context, fd_p))


@dataclass
class CheckReport:
    name: str
    trials: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def run_battery(
    seed: int = 0, trials: int = 100, tolerance: float = DEFAULT_TOLERANCE
) -> list[CheckReport]:
    checks = [
        ("grad_vs_fd", lambda rng: _check_plain_grad(rng)),
        ("meta_grad_k1_vs_fd", lambda rng: _check_meta_grad(rng, 1)),
        ("meta_grad_k2_vs_fd", lambda rng: _check_meta_grad(rng, 2)),
    ]
    reports = []
    for name, check in checks:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), hash_name(name)]))
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, check(rng))
        reports.append(CheckReport(name, trials, worst, tolerance))
    return reports


def hash_name(name: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
