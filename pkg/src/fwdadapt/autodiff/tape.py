"""Reverse-mode differentiation on an append-only tape.

Values are wrapped in :class:`Var`; every operation appends one node holding the
operation name, its input node ids and a closure over the saved activations
that maps the output cotangent to input cotangents. Because nodes are appended
as they are computed, the tape is already in topological order and the
backward pass is a single reverse sweep.

The module-level functions mirror the kernel names in :mod:`fwdadapt.tensor`, so
a model written against ``ops.linear``/``ops.layer_norm``/... runs unchanged on
either backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from fwdadapt import tensor as T


class UnsupportedOpError(TypeError):
    """An operation was applied to a recorded value that the tape cannot track."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple] | None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def _push(self, op, inputs, backward) -> int:
        self.nodes.append(Node(op, tuple(inputs), backward))
        return len(self.nodes) - 1

    def leaf(self, value) -> "Var":
        return Var(np.array(value, dtype=T.DTYPE), self, self._push("leaf", (), None))

    def backward(self, out: "Var") -> list[np.ndarray | None]:
        """Return the cotangent of ``out`` w.r.t. every node (None if unreached)."""
        if out.tape is not self:
            raise UnsupportedOpError("output was not recorded on this tape")
        if out.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[out.node] = np.ones_like(out.data)
        for i in range(out.node, -1, -1):
            g, node = grads[i], self.nodes[i]
            if g is None or node.backward is None:
                continue
            for j, gj in zip(node.inputs, node.backward(g)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return grads


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """A float64 array recorded on a :class:`Tape`."""

    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, tape: Tape, node: int):
        self.data = data
        self.tape = tape
        self.node = node

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, node={self.node})"

    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError("recorded values cannot be converted to plain arrays; use .data")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        table = {np.add: add, np.subtract: sub, np.multiply: mul, np.true_divide: div}
        if method == "__call__" and ufunc in table and not kwargs:
            return table[ufunc](*inputs)
        raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} is not recorded on the tape")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy function {func.__name__!r} is not recorded on the tape")

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise UnsupportedOpError("only constant exponents are supported")
        x = self.data
        return _record("pow", x**p, [self], lambda g: (g * p * x ** (p - 1),))

    def __getitem__(self, idx):
        x = self.data

        def back(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)

        return _record("getitem", x[idx], [self], back)

    def reshape(self, *shape):
        old = self.data.shape
        return _record("reshape", self.data.reshape(*shape), [self], lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        inv = np.argsort(axes)
        return _record("transpose", self.data.transpose(axes), [self], lambda g: (g.transpose(inv),))

    def sum(self, axis=None, keepdims=False):
        x = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return _record("sum", x.sum(axis=axis, keepdims=keepdims), [self], back)

    def mean(self, axis=None, keepdims=False):
        x = self.data
        count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _record(op: str, value, inputs, backward) -> Var:
    """Append a node whose recorded inputs are the :class:`Var` entries of ``inputs``."""
    tapes = {id(v.tape): v.tape for v in inputs if isinstance(v, Var)}
    if not tapes:
        # no recorded operand: constant subexpression, nothing to track
        return T._finite(np.asarray(value, dtype=T.DTYPE), op)
    if len(tapes) != 1:
        raise UnsupportedOpError(f"{op}: operands must come from exactly one tape")
    tape = next(iter(tapes.values()))
    ids = [v.node if isinstance(v, Var) else None for v in inputs]
    value = np.asarray(value, dtype=T.DTYPE)
    if not np.all(np.isfinite(value)):
        raise T.NonFiniteError(f"{op}: non-finite value in output")
    return Var(value, tape, tape._push(op, ids, backward))


def _val(x):
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=T.DTYPE)


def add(a, b) -> Var:
    x, y = _val(a), _val(b)
    return _record("add", x + y, [a, b], lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Var:
    x, y = _val(a), _val(b)
    return _record("sub", x - y, [a, b], lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def mul(a, b) -> Var:
    x, y = _val(a), _val(b)
    return _record(
        "mul", x * y, [a, b], lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    )


def div(a, b) -> Var:
    if isinstance(b, Var):
        return mul(a, b**-1)
    return mul(a, 1.0 / _val(b))


def matmul(a, b) -> Var:
    x, y = _val(a), _val(b)
    if x.shape[-1] != y.shape[-2]:
        raise T.ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")

    def back(g):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _record("matmul", x @ y, [a, b], back)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def sqrt(a) -> Var:
    y = np.sqrt(_val(a))
    return _record("sqrt", y, [a], lambda g: (g * 0.5 / y,))


def exp(a) -> Var:
    y = np.exp(_val(a))
    return _record("exp", y, [a], lambda g: (g * y,))


def log(a) -> Var:
    x = _val(a)
    return _record("log", np.log(x), [a], lambda g: (g / x,))


def relu(a) -> Var:
    x = _val(a)
    return _record("relu", np.maximum(x, 0.0), [a], lambda g: (g * (x > 0),))


def gelu(a) -> Var:
    x = _val(a)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _record("gelu", x * cdf, [a], lambda g: (g * (cdf + x * pdf),))


def softmax(a, axis: int = -1) -> Var:
    y = T.softmax(_val(a), axis=axis)
    return _record("softmax", y, [a], lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Var:
    y = T.log_softmax(_val(a), axis=axis)
    p = np.exp(y)
    return _record("log_softmax", y, [a], lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def entropy_from_logits(a) -> Var:
    """Per-row entropy of softmax(logits); d/dz = -p * (log p + H)."""
    z = _val(a)
    logp = T.log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    return _record("entropy", h, [a], lambda g: (-g[..., None] * p * (logp + h[..., None]),))


def cross_entropy(logits, labels) -> Var:
    z = _val(logits)
    n = len(labels)
    logp = T.log_softmax(z)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _record("cross_entropy", loss, [logits], back)


def _norm_backward(g_hat, xhat, inv_std, axes):
    """Cotangent of standardization ``xhat = (x - mean) * inv_std`` over ``axes``."""
    m = np.prod([xhat.shape[a] for a in axes])
    return inv_std * (
        g_hat - g_hat.sum(axis=axes, keepdims=True) / m
        - xhat * (g_hat * xhat).sum(axis=axes, keepdims=True) / m
    )


def layer_norm(x, gamma, beta, eps: float = T.EPS) -> Var:
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    out = T.layer_norm(xv, gv, bv, eps)
    mu = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(((xv - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std
    lead = tuple(range(xv.ndim - 1))

    def back(g):
        gx = _norm_backward(g * gv, xhat, inv_std, (xv.ndim - 1,))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, [x, gamma, beta], back)


def group_norm(x, groups: int, gamma, beta, eps: float = T.EPS) -> Var:
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    out = T.group_norm(xv, groups, gv, bv, eps)
    n, c, h, w = xv.shape
    xg = xv.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(((xg - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat_g = (xg - mu) * inv_std
    xhat = xhat_g.reshape(xv.shape)

    def back(g):
        g_hat = (g * gv[None, :, None, None]).reshape(n, groups, -1)
        gx = _norm_backward(g_hat, xhat_g, inv_std, (2,)).reshape(xv.shape)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record("group_norm", out, [x, gamma, beta], back)


def conv2d(x, weight, stride: int = 1, pad: int = 0, bias=None) -> Var:
    xv, wv = _val(x), _val(weight)
    n, c, h, w = xv.shape
    o, _, kh, kw = wv.shape
    cols = T.im2col(xv, kh, kw, stride, pad)
    out = T.conv2d(xv, wv, stride, pad)
    ho, wo = out.shape[2:]
    wmat = wv.reshape(o, -1)

    def back(g):
        gm = g.reshape(n, o, ho * wo).transpose(0, 2, 1)  # (N, P, O)
        gw = np.einsum("npo,npk->ok", gm, cols).reshape(wv.shape)
        gx = T.col2im(gm @ wmat, xv.shape, kh, kw, stride, pad)
        return gx, gw

    res = _record("conv2d", out, [x, weight], back)
    if bias is not None:
        res = add(res, reshape_bias(bias))
    return res


def reshape_bias(b):
    return b.reshape(1, -1, 1, 1) if isinstance(b, Var) else np.asarray(b).reshape(1, -1, 1, 1)


def attention(x, wqkv, bqkv, wo, bo, heads: int) -> Var:
    n, m, d = x.shape
    hd = d // heads
    qkv = linear(x, wqkv, bqkv).reshape(n, m, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd)))
    out = matmul(att, v).transpose(0, 2, 1, 3).reshape(n, m, d)
    return linear(out, wo, bo)


def prepend_token(tokens, token) -> Var:
    tv, kv = _val(tokens), _val(token)
    n, _, d = tv.shape
    out = np.concatenate([np.broadcast_to(kv.reshape(1, 1, d), (n, 1, d)), tv], axis=1)
    return _record(
        "prepend_token", out, [tokens, token],
        lambda g: (g[:, 1:], g[:, 0].sum(axis=0).reshape(kv.shape)),
    )


def token_mean(x):
    return x.mean(axis=1)


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


EPS = T.EPS
