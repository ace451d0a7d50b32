"""Minimal reverse-mode tape over dense numpy arrays.

Values are C-contiguous float64 ndarrays. Each recorded operation yields a
Node holding the forward value, references to its parent nodes, and a
backward rule (a closure mapping the upstream gradient to one gradient per
parent). `backward` walks the graph once in reverse topological order, so
every backward rule runs exactly once per call.

Engine-wide modes (set via context managers):
  soft_spike_mode  -- spike forward becomes a sigmoid so the whole network
                      is smooth and finite-difference checkable
  no_tape          -- record values only, no graph (cheap evaluation)
  debug_mode       -- validate every recorded value for NaN/Inf

Gradient accumulation into leaf parameters is additive; call `zero_grad`
between optimizer steps. Node values must never be mutated in place after
recording: recurrent rollouts reuse node values across timesteps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# Surrogate spike derivative: gain * exp(-|u - theta| / tau).
SURROGATE_GAIN = 1.0
SURROGATE_TAU = 1.0

_SOFT_SPIKE = False
_NO_TAPE = False
_DEBUG = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op."""


class Node:
    """One entry on the tape: a value, its parents, and a backward rule."""

    __slots__ = ("value", "parents", "vjp", "grad", "requires_grad", "op", "_backward_ran")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._backward_ran = False

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(a)


def const(x) -> Node:
    return Node(as_value(x), op="const")


def param(x) -> Node:
    return Node(as_value(x), requires_grad=True, op="param")


def is_node(x) -> bool:
    return isinstance(x, Node)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


@contextlib.contextmanager
def soft_spike_mode(enabled: bool = True):
    global _SOFT_SPIKE
    prev, _SOFT_SPIKE = _SOFT_SPIKE, enabled
    try:
        yield
    finally:
        _SOFT_SPIKE = prev


def soft_spike_enabled() -> bool:
    return _SOFT_SPIKE


@contextlib.contextmanager
def no_tape(enabled: bool = True):
    global _NO_TAPE
    prev, _NO_TAPE = _NO_TAPE, enabled
    try:
        yield
    finally:
        _NO_TAPE = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


# --- op table -------------------------------------------------------------
# Each builder returns (value, vjp). vjp maps the upstream gradient to a
# tuple of per-parent gradients, aligned with the input order.


def _op_add(a, b, attrs):
    _check_broadcast("add", a, b)
    out = a.value + b.value
    ash, bsh = a.value.shape, b.value.shape
    return out, lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))


def _op_sub(a, b, attrs):
    _check_broadcast("sub", a, b)
    out = a.value - b.value
    ash, bsh = a.value.shape, b.value.shape
    return out, lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))


def _op_hadamard(a, b, attrs):
    _check_broadcast("hadamard", a, b)
    out = a.value * b.value
    av, bv = a.value, b.value
    return out, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))


def _op_matvec(m, v, attrs):
    mv, vv = m.value, v.value
    ok = (mv.ndim == 2 and vv.ndim == 1 and mv.shape[1] == vv.shape[0]) or (
        mv.ndim == 3 and vv.ndim == 2 and mv.shape[0] == vv.shape[0] and mv.shape[2] == vv.shape[1]
    )
    if not ok:
        raise ShapeError(f"mat-vec: shapes {mv.shape} and {vv.shape} do not conform")
    if mv.ndim == 2:
        out = mv @ vv

        def vjp(g):
            return np.outer(g, vv), mv.T @ g
    else:
        # leading batch axis: (B,m,n) @ (B,n) -> (B,m)
        out = np.matmul(mv, vv[..., None])[..., 0]

        def vjp(g):
            dm = g[:, :, None] * vv[:, None, :]
            dv = np.matmul(mv.transpose(0, 2, 1), g[..., None])[..., 0]
            return dm, dv

    return out, vjp


def _op_matmat(a, b, attrs):
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"mat-mat: shapes {av.shape} and {bv.shape} do not conform")
    out = av @ bv
    return out, lambda g: (g @ bv.T, av.T @ g)


def _op_outer(u, v, attrs):
    uv, vv = u.value, v.value
    if uv.ndim == 1 and vv.ndim == 1:
        out = np.outer(uv, vv)
        return out, lambda g: (g @ vv, g.T @ uv)
    if uv.ndim == 2 and vv.ndim == 2 and uv.shape[0] == vv.shape[0]:
        # batched: (B,m) x (B,n) -> (B,m,n)
        out = uv[:, :, None] * vv[:, None, :]

        def vjp(g):
            return np.einsum("bmn,bn->bm", g, vv), np.einsum("bmn,bm->bn", g, uv)

        return out, vjp
    raise ShapeError(f"outer-product: shapes {uv.shape} and {vv.shape} do not conform")


def _op_scale(x, attrs):
    c = float(attrs["c"])
    return c * x.value, lambda g: (c * g,)


def _op_exp(x, attrs):
    out = np.exp(x.value)
    return out, lambda g: (g * out,)


def _op_log(x, attrs):
    xv = x.value
    return np.log(xv), lambda g: (g / xv,)


def _op_sigmoid(x, attrs):
    out = 1.0 / (1.0 + np.exp(-x.value))
    return out, lambda g: (g * out * (1.0 - out),)


def _op_negate(x, attrs):
    return -x.value, lambda g: (-g,)


def _reduce_vjp(xv, axis):
    def expand(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return expand


def _op_sum(x, attrs):
    axis = attrs.get("axis")
    expand = _reduce_vjp(x.value, axis)
    return np.sum(x.value, axis=axis), lambda g: (expand(g),)


def _op_mean(x, attrs):
    axis = attrs.get("axis")
    xv = x.value
    n = xv.size if axis is None else xv.shape[axis]
    expand = _reduce_vjp(xv, axis)
    return np.mean(xv, axis=axis), lambda g: (expand(g) / n,)


def _op_clamp(x, attrs):
    lo, hi = float(attrs["lo"]), float(attrs["hi"])
    xv = x.value
    gate = (xv > lo) & (xv < hi)  # gradient zero at and beyond the bounds
    return np.clip(xv, lo, hi), lambda g: (g * gate,)


def _op_transpose(x, attrs):
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {x.value.shape}")
    return x.value.T.copy(), lambda g: (g.T,)


def _op_concat(*xs, attrs):
    axis = attrs.get("axis", 0)
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _op_slice(x, attrs):
    key = attrs["key"]
    xv = x.value
    out = xv[key].copy()

    def vjp(g):
        full = np.zeros_like(xv)
        full[key] = g
        return (full,)

    return out, vjp


def _op_weighted_sum(*xs, attrs):
    """y = sum_k coeffs[k] * xs[k]; coeffs are constants (scalars or arrays)."""
    coeffs = attrs["coeffs"]
    if len(coeffs) != len(xs):
        raise ShapeError(f"weighted-sum: {len(xs)} inputs vs {len(coeffs)} coefficients")
    shape = xs[0].value.shape
    for x in xs:
        if x.value.shape != shape:
            raise ShapeError(f"weighted-sum: shapes {shape} and {x.value.shape} differ")
    out = np.zeros(np.broadcast_shapes(shape, np.shape(coeffs[0])), dtype=np.float64)
    for c, x in zip(coeffs, xs):
        out += c * x.value

    def vjp(g):
        return tuple(c * g for c in coeffs)

    return out, vjp


def _op_plastic_matvec(w, alpha, e, a, attrs):
    """u = (W + alpha ⊙ E) @ a with E batched: (B,m,n) traces, (B,n) inputs.

    Fused so the per-step (B,m,n) effective-weight tensor is never stored on
    the tape; the backward rule rebuilds it from the parent values.
    """
    wv, av_, ev, xv = w.value, alpha.value, e.value, a.value
    if wv.ndim != 2 or av_.shape != wv.shape:
        raise ShapeError(f"plastic-matvec: W {wv.shape} vs alpha {av_.shape}")
    if ev.ndim != 3 or ev.shape[1:] != wv.shape or xv.ndim != 2 or xv.shape != (ev.shape[0], wv.shape[1]):
        raise ShapeError(f"plastic-matvec: E {ev.shape}, a {xv.shape}, W {wv.shape} do not conform")
    weff = wv + av_ * ev
    out = np.matmul(weff, xv[..., None])[..., 0]

    def vjp(g):
        ga = g[:, :, None] * xv[:, None, :]  # (B,m,n) = g ⊗ a per episode
        dw = ga.sum(axis=0)
        dalpha = (ga * ev).sum(axis=0)
        de = ga * av_
        weff_b = wv + av_ * ev
        da = np.matmul(weff_b.transpose(0, 2, 1), g[..., None])[..., 0]
        return dw, dalpha, de, da

    return out, vjp


_OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "hadamard": _op_hadamard,
    "mat-vec": _op_matvec,
    "mat-mat": _op_matmat,
    "outer-product": _op_outer,
    "scalar-scale": _op_scale,
    "exp": _op_exp,
    "negate": _op_negate,
    "sum": _op_sum,
    "mean": _op_mean,
    "clamp": _op_clamp,
    "log": _op_log,
    "sigmoid": _op_sigmoid,
    "transpose": _op_transpose,
    "concat": _op_concat,
    "slice": _op_slice,
    "weighted-sum": _op_weighted_sum,
    "plastic-matvec": _op_plastic_matvec,
}

_VARIADIC = {"concat", "weighted-sum"}


def record(kind: str, inputs: Sequence[Node], **attrs) -> Node:
    """Apply `kind` to `inputs` and put the result on the tape."""
    if kind not in _OPS:
        raise ValueError(f"unknown op-kind {kind!r}")
    nodes = tuple(_wrap(x) for x in inputs)
    builder = _OPS[kind]
    if kind in _VARIADIC:
        value, vjp = builder(*nodes, attrs=attrs)
    else:
        value, vjp = builder(*nodes, attrs)
    value = np.asarray(value, dtype=np.float64)
    if _DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by op {kind!r}")
    needs = any(n.requires_grad for n in nodes)
    if _NO_TAPE or not needs:
        return Node(value, op=kind)
    return Node(value, parents=nodes, vjp=vjp, requires_grad=True, op=kind)


# thin functional wrappers used throughout the package

def add(a, b) -> Node:
    return record("add", (a, b))


def sub(a, b) -> Node:
    return record("sub", (a, b))


def hadamard(a, b) -> Node:
    return record("hadamard", (a, b))


def matvec(m, v) -> Node:
    return record("mat-vec", (m, v))


def matmat(a, b) -> Node:
    return record("mat-mat", (a, b))


def outer(u, v) -> Node:
    return record("outer-product", (u, v))


def scale(x, c: float) -> Node:
    return record("scalar-scale", (x,), c=c)


def exp(x) -> Node:
    return record("exp", (x,))


def log(x) -> Node:
    return record("log", (x,))


def sigmoid(x) -> Node:
    return record("sigmoid", (x,))


def negate(x) -> Node:
    return record("negate", (x,))


def sum_(x, axis=None) -> Node:
    return record("sum", (x,), axis=axis)


def mean(x, axis=None) -> Node:
    return record("mean", (x,), axis=axis)


def clamp(x, lo: float, hi: float) -> Node:
    return record("clamp", (x,), lo=lo, hi=hi)


def weighted_sum(xs, coeffs) -> Node:
    return record("weighted-sum", tuple(xs), coeffs=tuple(coeffs))


def plastic_matvec(w, alpha, e, a) -> Node:
    return record("plastic-matvec", (w, alpha, e, a))


def spike_surrogate(u: Node, theta: float, gain: float = None, tau: float = None) -> Node:
    """Threshold spike with a surrogate derivative.

    Hard mode forward: 1 where u >= theta else 0. Backward passes
    gain * exp(-|u - theta| / tau) regardless of the spike outcome.
    Soft mode (see `soft_spike_mode`) replaces the forward with
    sigmoid((u - theta) / tau) and uses its exact derivative, so gradients
    are finite-difference checkable end to end.
    """
    u = _wrap(u)
    if theta <= 0:
        raise ValueError(f"spike threshold must be positive, got {theta}")
    g_ = SURROGATE_GAIN if gain is None else gain
    t_ = SURROGATE_TAU if tau is None else tau
    uv = u.value
    if _SOFT_SPIKE:
        out = 1.0 / (1.0 + np.exp(-(uv - theta) / t_))

        def vjp(g):
            return (g * out * (1.0 - out) / t_,)
    else:
        out = (uv >= theta).astype(np.float64)

        def vjp(g):
            return (g * g_ * np.exp(-np.abs(uv - theta) / t_),)

    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by op 'spike'")
    if _NO_TAPE or not u.requires_grad:
        return Node(out, op="spike")
    return Node(out, parents=(u,), vjp=vjp, requires_grad=True, op="spike")


def surrogate_derivative(u, theta: float, gain: float = None, tau: float = None) -> np.ndarray:
    """The spike derivative itself (hard mode), for inspection and tests."""
    g_ = SURROGATE_GAIN if gain is None else gain
    t_ = SURROGATE_TAU if tau is None else tau
    uv = u.value if isinstance(u, Node) else as_value(u)
    return g_ * np.exp(-np.abs(uv - theta) / t_)


def _toposort(root: Node) -> list:
    """Reverse-topological schedule of the grad-requiring subgraph."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Node, params: dict | None = None) -> dict:
    """Backpropagate from a scalar loss; returns {param_name: grad}.

    Gradients accumulate additively into every reachable leaf's `.grad`.
    If `params` (name -> Node) is given, the returned map covers exactly
    those entries, with zeros for parameters the loss does not reach.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.value.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    if loss._backward_ran:
        raise RuntimeError("repeated backward on the same loss without reset")
    loss._backward_ran = True

    if not loss.requires_grad:
        order = []
    else:
        order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)

    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.value) if p.grad is None else p.grad
    return out


def zero_grad(params) -> None:
    nodes = params.values() if isinstance(params, dict) else params
    for p in nodes:
        p.grad = None
