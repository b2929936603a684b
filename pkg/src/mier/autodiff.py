"""Reverse-mode automatic differentiation over float64 numpy arrays.

Values are wrapped in :class:`Var` nodes that record their parents together
with a vector-Jacobian closure. Every vjp is itself written using these same
primitives, so the output of :func:`backward` is another differentiable graph.
Calling backward on a gradient node therefore yields exact second-order
derivatives, which is what the context meta-gradient needs.

Deliberately small: 2-D arrays, float64 only, no broadcasting beyond what the
feed-forward networks here require.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError

Array = np.ndarray

_LOG_2PI = float(np.log(2.0 * np.pi))


class Var:
    """A node in the computation graph holding an eagerly computed value."""

    __slots__ = ("value", "parents")

    def __init__(self, value, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        # parents: tuple of (Var, vjp) where vjp maps the output gradient
        # (a Var) to this parent's gradient contribution (a Var).
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={not self.parents})"

    # Operator sugar used sparingly; the heavy paths call the functions below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    """A leaf carrying data; gradients never flow into it."""
    return Var(x)


# ---------------------------------------------------------------------------
# shape plumbing


def _sum_to_shape(g: Var, shape: tuple) -> Var:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.value.shape == shape:
        return g
    # Sum over leading axes added by broadcasting, then over axes of size 1.
    nd_extra = g.value.ndim - len(shape)
    out = g
    for _ in range(nd_extra):
        out = sum_axis0(out)
    for ax, n in enumerate(shape):
        if n == 1 and out.value.shape[ax] != 1:
            out = sum_axis(out, ax, keepdims=True)
    return out


def sum_axis0(a: Var) -> Var:
    a = as_var(a)
    n = a.value.shape[0]
    return Var(a.value.sum(axis=0), ((a, lambda g: broadcast_rows(g, n)),))


def sum_axis(a: Var, axis: int, keepdims: bool = True) -> Var:
    a = as_var(a)
    shape = a.value.shape

    def vjp(g: Var) -> Var:
        gv = g
        if not keepdims:
            gv = reshape(gv, tuple(1 if i == axis else s for i, s in enumerate(shape)))
        return broadcast_to(gv, shape)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def broadcast_rows(v: Var, n: int) -> Var:
    """Tile a 1-D vector into n identical rows: (d,) -> (n, d)."""
    v = as_var(v)
    out = np.broadcast_to(v.value, (n,) + v.value.shape)
    return Var(out, ((v, sum_axis0),))


def broadcast_to(a: Var, shape: tuple) -> Var:
    a = as_var(a)
    src_shape = a.value.shape
    return Var(
        np.broadcast_to(a.value, shape),
        ((a, lambda g: _sum_to_shape(g, src_shape)),),
    )


def reshape(a: Var, shape: tuple) -> Var:
    a = as_var(a)
    src_shape = a.value.shape
    return Var(a.value.reshape(shape), ((a, lambda g: reshape(g, src_shape)),))


def transpose(a: Var) -> Var:
    a = as_var(a)
    return Var(a.value.T, ((a, transpose),))


def take_slice(a: Var, start: int, stop: int) -> Var:
    """1-D slice a[start:stop], used to unpack flat parameter vectors."""
    a = as_var(a)
    n = a.value.shape[0]

    def vjp(g: Var) -> Var:
        return pad_slice(g, start, n)

    return Var(a.value[start:stop], ((a, vjp),))


def pad_slice(g: Var, start: int, total: int) -> Var:
    g = as_var(g)
    m = g.value.shape[0]
    out = np.zeros(total, dtype=np.float64)
    out[start : start + m] = g.value
    return Var(out, ((g, lambda gg: take_slice(gg, start, start + m)),))


def slice_cols(a: Var, start: int, stop: int) -> Var:
    a = as_var(a)
    ncols = a.value.shape[1]

    def vjp(g: Var) -> Var:
        return pad_cols(g, start, ncols)

    return Var(a.value[:, start:stop], ((a, vjp),))


def pad_cols(g: Var, start: int, total: int) -> Var:
    g = as_var(g)
    rows, m = g.value.shape
    out = np.zeros((rows, total), dtype=np.float64)
    out[:, start : start + m] = g.value
    return Var(out, ((g, lambda gg: slice_cols(gg, start, start + m)),))


def concat_cols(parts: Sequence[Var]) -> Var:
    parts = [as_var(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    parents = []
    for p, off, w in zip(parts, offsets[:-1], widths):
        parents.append((p, lambda g, o=int(off), w=int(w): slice_cols(g, o, o + w)))
    return Var(np.concatenate([p.value for p in parts], axis=1), tuple(parents))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(
        a.value + b.value,
        (
            (a, lambda g: _sum_to_shape(g, sa)),
            (b, lambda g: _sum_to_shape(g, sb)),
        ),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(
        a.value - b.value,
        (
            (a, lambda g: _sum_to_shape(g, sa)),
            (b, lambda g: _sum_to_shape(neg(g), sb)),
        ),
    )


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, ((a, neg),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(
        a.value * b.value,
        (
            (a, lambda g: _sum_to_shape(mul(g, b), sa)),
            (b, lambda g: _sum_to_shape(mul(g, a), sb)),
        ),
    )


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return Var(a.value * c, ((a, lambda g: scale(g, c)),))


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value @ b.value,
        (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ),
    )


def sum_all(a: Var) -> Var:
    a = as_var(a)
    shape = a.value.shape
    return Var(a.value.sum(), ((a, lambda g: broadcast_to(g, shape)),))


def dense(params: Var, x: Var, offset: int, d_in: int, d_out: int) -> Var:
    """Fused x @ W + b where (W, b) live at `offset` in a flat param vector.

    One graph node per layer instead of five; the backward rules still
    compose differentiable primitives, so second-order terms stay exact.
    """
    n_params = params.value.shape[0]
    w_end = offset + d_in * d_out
    w = params.value[offset:w_end].reshape(d_in, d_out)
    b = params.value[w_end : w_end + d_out]

    def vjp_params(g: Var) -> Var:
        return pad_cat(matmul(transpose(x), g), sum_axis0(g), offset, n_params)

    def vjp_x(g: Var) -> Var:
        w_var = reshape(take_slice(params, offset, w_end), (d_in, d_out))
        return matmul(g, transpose(w_var))

    return Var(x.value @ w + b, ((params, vjp_params), (x, vjp_x)))


def pad_cat(dw: Var, db: Var, offset: int, total: int) -> Var:
    """Scatter a weight-matrix gradient and a bias gradient into one flat
    vector of length `total`, zero elsewhere."""
    d_in, d_out = dw.value.shape
    out = np.zeros(total, dtype=np.float64)
    w_end = offset + d_in * d_out
    out[offset:w_end] = dw.value.ravel()
    out[w_end : w_end + d_out] = db.value

    def vjp_dw(g: Var) -> Var:
        return reshape(take_slice(g, offset, w_end), (d_in, d_out))

    def vjp_db(g: Var) -> Var:
        return take_slice(g, w_end, w_end + d_out)

    return Var(out, ((dw, vjp_dw), (db, vjp_db)))


def mean_all(a: Var) -> Var:
    a = as_var(a)
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Var) -> Var:
    a = as_var(a)
    mask = constant((a.value > 0).astype(np.float64))
    return Var(np.maximum(a.value, 0.0), ((a, lambda g: mul(g, mask)),))


def tanh(a: Var) -> Var:
    a = as_var(a)
    out = Var(np.tanh(a.value))

    def vjp(g: Var) -> Var:
        return mul(g, sub(constant(1.0), mul(out, out)))

    out.parents = ((a, vjp),)
    return out


def exp(a: Var) -> Var:
    a = as_var(a)
    out = Var(np.exp(a.value))
    out.parents = ((a, lambda g: mul(g, out)),)
    return out


def sigmoid(a: Var) -> Var:
    a = as_var(a)
    # 1/(1+e^-x) via expit-style stable evaluation.
    x = a.value
    out_val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Var(out_val)

    def vjp(g: Var) -> Var:
        return mul(g, mul(out, sub(constant(1.0), out)))

    out.parents = ((a, vjp),)
    return out


def softplus(a: Var) -> Var:
    """log(1 + e^x), evaluated stably."""
    a = as_var(a)
    out = Var(np.logaddexp(0.0, a.value))

    def vjp(g: Var) -> Var:
        return mul(g, sigmoid(a))

    out.parents = ((a, vjp),)
    return out


def clamp(a: Var, lo: float, hi: float) -> Var:
    a = as_var(a)
    inside = constant(((a.value > lo) & (a.value < hi)).astype(np.float64))
    return Var(np.clip(a.value, lo, hi), ((a, lambda g: mul(g, inside)),))


def minimum(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    take_a = a.value <= b.value
    mask_a = constant(take_a.astype(np.float64))
    mask_b = constant((~take_a).astype(np.float64))
    return Var(
        np.minimum(a.value, b.value),
        (
            (a, lambda g: mul(g, mask_a)),
            (b, lambda g: mul(g, mask_b)),
        ),
    )


def detach(a: Var) -> Var:
    """Cut the graph: same value, no parents."""
    return Var(as_var(a).value)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(root: Var, wrt: Iterable[Var]) -> list[Var]:
    """Gradients of a scalar root with respect to each Var in `wrt`.

    Returned gradients are Vars: differentiable graphs over the original
    leaves, so they can be fed back into backward for second-order terms.
    A target absent from the graph gets an all-zero gradient.
    """
    wrt = list(wrt)
    if root.value.ndim != 0:
        raise NumericError(f"backward expects a scalar root, got shape {root.value.shape}")
    if not np.isfinite(root.value):
        raise NumericError("backward called on a non-finite loss")
    grads: dict[int, Var] = {id(root): constant(1.0)}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for v in wrt:
        g = grads.get(id(v))
        out.append(g if g is not None else constant(np.zeros_like(v.value)))
    return out


def value_and_grad(f: Callable[..., Var], *leaves: Var) -> tuple[float, list[Array]]:
    """Evaluate a scalar-valued graph builder and return plain-array grads."""
    out = f(*leaves)
    grads = backward(out, leaves)
    return float(out.value), [g.value.copy() for g in grads]
