"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive applied to a recorded :class:`Var` appends a node to that
variable's :class:`Tape`. A backward sweep walks the tape once, newest node
first. With ``create_graph=True`` the sweep itself is recorded (all VJPs are
written with the same primitives), which is how Hessian-vector products are
obtained: differentiate ``grad(L) . u`` a second time.

Primitives accept plain arrays too and then just compute values, so the same
VJP code serves both the plain and the recorded sweep.
"""

from __future__ import annotations

import functools
from typing import Callable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Non-finite value produced inside a differentiated computation."""


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> "Var":
        """Register an independent leaf variable."""
        v = Var(np.asarray(value, dtype=np.float64), self, (), None, "leaf")
        return v

    def _append(self, v: "Var"):
        v.index = len(self.nodes)
        self.nodes.append(v)

    def backward(self, out: "Var", wrt: Sequence["Var"], seed=None, create_graph=False):
        """Adjoints of ``out`` with respect to each variable in ``wrt``.

        Unreached inputs get zeros. Returns recorded Vars when ``create_graph``,
        else arrays.
        """
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if seed is None:
            seed = np.ones_like(out.value)
        adj = {out.index: seed}
        stop = min((w.index for w in wrt), default=0)
        nodes = self.nodes
        for k in range(out.index, stop - 1, -1):
            g = adj.pop(k, None)
            if g is None:
                continue
            node = nodes[k]
            if node.vjp is None:
                adj[k] = g
                continue
            if create_graph:
                parent_args = node.parents
                out_arg = node
            else:
                parent_args = tuple(p.value if isinstance(p, Var) else p for p in node.parents)
                out_arg = node.value
            contribs = node.vjp(g, out_arg, *parent_args)
            for p, c in zip(node.parents, contribs):
                if c is None or not isinstance(p, Var) or p.tape is not self:
                    continue
                prev = adj.get(p.index)
                adj[p.index] = c if prev is None else add(prev, c)
        result = []
        for w in wrt:
            g = adj.get(w.index)
            if g is None:
                g = np.zeros_like(w.value)
            result.append(g)
        return result


class Var:
    """A recorded value on a tape."""

    __slots__ = ("value", "tape", "parents", "vjp", "op", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape, parents, vjp, op):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.index = -1
        tape._append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var({self.op}#{self.index}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _primitive(name: str, fn: Callable, args: tuple, vjp: Callable):
    tape = _tape_of(args)
    vals = [value(a) for a in args]
    out = np.asarray(fn(*vals), dtype=np.float64)
    if not np.isfinite(out).all():
        where = f"node {len(tape.nodes)}" if tape is not None else "untracked op"
        raise NumericError(f"non-finite result from {name} ({where})")
    if tape is None:
        return out
    return Var(out, tape, args, vjp, name)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    gshape = value(g).shape
    if gshape == tuple(shape):
        return g
    return sum_to(g, tuple(shape))


def _shape(x):
    return np.shape(value(x))


# --- elementwise -----------------------------------------------------------

def add(a, b):
    return _primitive("add", np.add, (a, b),
                      lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))))


def sub(a, b):
    return _primitive("sub", np.subtract, (a, b),
                      lambda g, out, a, b: (_unbroadcast(g, _shape(a)),
                                            _unbroadcast(neg(g), _shape(b))))


def mul(a, b):
    return _primitive("mul", np.multiply, (a, b),
                      lambda g, out, a, b: (_unbroadcast(mul(g, b), _shape(a)),
                                            _unbroadcast(mul(g, a), _shape(b))))


def div(a, b):
    def vjp(g, out, a, b):
        ga = div(g, b)
        return (_unbroadcast(ga, _shape(a)),
                _unbroadcast(neg(mul(ga, out)), _shape(b)))
    return _primitive("div", np.divide, (a, b), vjp)


def neg(a):
    return _primitive("neg", np.negative, (a,), lambda g, out, a: (neg(g),))


def exp(a):
    return _primitive("exp", np.exp, (a,), lambda g, out, a: (mul(g, out),))


def log(a):
    return _primitive("log", np.log, (a,), lambda g, out, a: (div(g, a),))


def tanh(a):
    return _primitive("tanh", np.tanh, (a,),
                      lambda g, out, a: (mul(g, sub(1.0, mul(out, out))),))


def relu(a):
    # subgradient 0 at the kink
    return _primitive("relu", lambda x: np.maximum(x, 0.0), (a,),
                      lambda g, out, a: (mul(g, (value(a) > 0).astype(np.float64)),))


def square(a):
    return mul(a, a)


# --- shape -----------------------------------------------------------------

def vsum(a, axis=None):
    in_shape = _shape(a)

    def vjp(g, out, a):
        if axis is not None:
            g = reshape(g, np.expand_dims(np.empty(value(out).shape), axis).shape)
        return (broadcast_to(g, in_shape),)
    return _primitive("sum", lambda x: np.sum(x, axis=axis), (a,), vjp)


def sum_to(a, shape):
    in_shape = _shape(a)

    def fn(x):
        lead = x.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + k for k, s in enumerate(shape) if s == 1 and x.shape[lead + k] != 1)
        return np.sum(x, axis=axes, keepdims=True).reshape(shape)
    return _primitive("sum_to", fn, (a,),
                      lambda g, out, a: (broadcast_to(g, in_shape),))


def broadcast_to(a, shape):
    in_shape = _shape(a)
    return _primitive("broadcast_to", lambda x: np.broadcast_to(x, shape).copy(), (a,),
                      lambda g, out, a: (sum_to(g, in_shape),))


def reshape(a, shape):
    in_shape = _shape(a)
    return _primitive("reshape", lambda x: np.reshape(x, shape), (a,),
                      lambda g, out, a: (reshape(g, in_shape),))


def transpose(a):
    return _primitive("transpose", np.transpose, (a,), lambda g, out, a: (transpose(g),))


def take(a, idx):
    """``a[idx]`` for basic or integer-array indexing."""
    in_shape = _shape(a)
    return _primitive("take", lambda x: np.array(x[idx]), (a,),
                      lambda g, out, a: (untake(g, idx, in_shape),))


def untake(g, idx, shape):
    """Scatter-add ``g`` into zeros of ``shape`` at ``idx``; adjoint of ``take``."""
    def fn(x):
        z = np.zeros(shape)
        np.add.at(z, idx, x)
        return z
    return _primitive("untake", fn, (g,), lambda gg, out, g: (take(gg, idx),))


def concatenate(parts):
    sizes = [int(np.prod(_shape(p))) for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, out, *ps):
        return tuple(take(g, slice(int(lo), int(hi))) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _primitive("concatenate", lambda *xs: np.concatenate([np.ravel(x) for x in xs]),
                      tuple(parts), vjp)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    def vjp(g, out, a, b):
        # only 2-d @ 2-d and 2-d @ 1-d are used
        if np.ndim(value(b)) == 1:
            return (outer(g, b), matmul(transpose(a), g))
        return (matmul(g, transpose(b)), matmul(transpose(a), g))
    return _primitive("matmul", np.matmul, (a, b), vjp)


def outer(a, b):
    return _primitive("outer", np.outer, (a, b),
                      lambda g, out, a, b: (matmul(g, b), matmul(transpose(g), a)))


def dot(a, b):
    return vsum(mul(a, b))


# --- fused softmax / cross-entropy ----------------------------------------

def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(a):
    """Row-wise softmax of a 2-d array."""
    def vjp(g, out, a):
        inner = vsum(mul(g, out), axis=1)
        return (mul(out, sub(g, reshape(inner, (-1, 1)))),)
    return _primitive("softmax", _softmax_np, (a,), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels)
    n, k = _shape(logits)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0

    def fn(z):
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return np.mean(lse - z[np.arange(n), labels])

    def vjp(g, out, z):
        return (mul(mul(g, 1.0 / n), sub(softmax(z), onehot)),)
    return _primitive("softmax_xent", fn, (logits,), vjp)


# --- functional API ----------------------------------------------------------
# Overflow inside a primitive surfaces as NumericError, so numpy's own warnings
# are silenced once per entry point rather than per operation.

def _quiet(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(all="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _as_var(tape: Tape, x):
    if isinstance(x, Var):
        return x, False
    return tape.var(x), True


@_quiet
def value_and_grad(f: Callable, x):
    """Value and gradient of scalar ``f`` at ``x``.

    If ``x`` is already a recorded Var the gradient is recorded too, so the
    result can be differentiated again.
    """
    if isinstance(x, Var):
        out = f(x)
        if not isinstance(out, Var):
            return out, np.zeros_like(x.value)
        (g,) = x.tape.backward(out, [x], create_graph=True)
        return out, g
    tape = Tape()
    xv = tape.var(x)
    out = f(xv)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(xv.value)
    (g,) = tape.backward(out, [xv])
    return float(out.value), g


def grad(f: Callable, x):
    return value_and_grad(f, x)[1]


@_quiet
def loss_grad(L: Callable, w, theta, t):
    """``(L(w, theta, t), grad_w L)`` as plain numbers."""
    tape = Tape()
    wv, thv = tape.var(w), tape.var(theta)
    out = L(wv, thv, t)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(wv.value)
    (g,) = tape.backward(out, [wv])
    return float(out.value), g


@_quiet
def grad_and_hvps(L: Callable, w, theta, t, vec):
    """One tape for the loss, its gradient, and both mixed products with ``vec``.

    Returns ``(L, g, H_ww vec, vec^T H_thetaw)`` where ``H_ww`` is the Hessian
    of ``L`` in ``w`` and ``H_thetaw`` the cross derivative ``d/dtheta grad_w L``.
    """
    tape = Tape()
    wv, thv = tape.var(w), tape.var(theta)
    out = L(wv, thv, t)
    if not isinstance(out, Var):
        z = np.zeros_like(wv.value)
        return float(out), z, z.copy(), np.zeros_like(thv.value)
    (g,) = tape.backward(out, [wv], create_graph=True)
    if not isinstance(g, Var):
        return float(out.value), g, np.zeros_like(wv.value), np.zeros_like(thv.value)
    s = dot(g, np.asarray(vec, dtype=np.float64))
    h_ww, h_tw = tape.backward(s, [wv, thv])
    return float(out.value), g.value.copy(), h_ww, h_tw


def hvp_ww(L: Callable, w, theta, t, vec):
    """``(d^2 L / dw^2) vec``, exact."""
    return grad_and_hvps(L, w, theta, t, vec)[2]


def hvp_thetaw(L: Callable, w, theta, t, vec):
    """``vec^T (d/dtheta grad_w L)``, one entry per hyperparameter."""
    return grad_and_hvps(L, w, theta, t, vec)[3]
