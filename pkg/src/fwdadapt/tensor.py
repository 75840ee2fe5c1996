"""Forward-only numeric kernels used by the toy models.

Tensors are plain ``numpy.ndarray`` objects in float64. Every kernel checks its
output for NaN/Inf and raises :class:`NonFiniteError` instead of letting a bad
value travel further down the pipeline.

The same function names are provided by :mod:`fwdadapt.autodiff` for recorded
values, which is how a single model definition serves both the forward-only
adaptation path and the first-order training/oracle path.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

EPS = 1e-5
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class DomainError(ValueError):
    """Raised when an input lies outside the kernel's domain."""


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite value in output")
    return out


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _finite(np.matmul(a, b), "matmul")


def linear(x, w, b=None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return _finite(out, "linear")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or stride < 1:
        raise ShapeError(f"conv2d: kernel {k} with stride {stride}, pad {pad} does not fit input size {size}")
    # trailing rows/columns that the last stride cannot reach are dropped
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N,C,H,W) into (N, Ho*Wo, C*kh*kw) patches."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add patches back to an image)."""
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, weight, stride: int = 1, pad: int = 0, bias=None, method: str = "im2col") -> np.ndarray:
    """2-D cross-correlation. ``method='loop'`` is the slow reference path."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, w)} + {pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if method == "im2col":
        cols = im2col(x, kh, kw, stride, pad)
        out = (cols @ weight.reshape(o, -1).T).transpose(0, 2, 1).reshape(n, o, ho, wo)
    elif method == "loop":
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, o, ho, wo), dtype=DTYPE)
        for i in range(ho):
            for j in range(wo):
                window = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[:, :, i, j] = np.tensordot(window, weight, axes=([1, 2, 3], [1, 2, 3]))
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    if bias is not None:
        out = out + as_tensor(bias)[None, :, None, None]
    return _finite(out, "conv2d")


def layer_norm(x, gamma, beta, eps: float = EPS) -> np.ndarray:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return _finite((x - mu) / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def group_norm(x, groups: int, gamma, beta, eps: float = EPS) -> np.ndarray:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels vs gamma {gamma.shape} / beta {beta.shape}")
    g = x.reshape(n, groups, -1)
    mu = g.mean(axis=-1, keepdims=True)
    var = ((g - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = ((g - mu) / np.sqrt(var + eps)).reshape(n, c, h, w)
    return _finite(xhat * gamma[None, :, None, None] + beta[None, :, None, None], "group_norm")


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def gelu(x) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    return _finite(0.5 * x * (1.0 + erf(x / np.sqrt(2.0))), "gelu")


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax: non-finite input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    m = x.max(axis=axis, keepdims=True)
    return _finite(x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True)), "log_softmax")


def entropy(p, tol: float = 1e-9) -> np.ndarray:
    """Shannon entropy (natural log) of probability rows; 0*log(0) is 0."""
    p = as_tensor(p)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise DomainError("entropy: rows must be probability vectors")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def entropy_from_logits(logits) -> np.ndarray:
    return entropy(softmax(logits))


def cross_entropy(logits, labels) -> float:
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def attention(x, wqkv, bqkv, wo, bo, heads: int) -> np.ndarray:
    """Multi-head self-attention over tokens of ``x`` (N, M, d)."""
    x = as_tensor(x)
    n, m, d = x.shape
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    hd = d // heads
    qkv = linear(x, wqkv, bqkv).reshape(n, m, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(n, m, d)
    return linear(out, wo, bo)


def prepend_token(tokens, token) -> np.ndarray:
    """Prepend one shared (d,) token to every sequence in (N, M, d)."""
    tokens, token = as_tensor(tokens), as_tensor(token)
    n, _, d = tokens.shape
    return np.concatenate([np.broadcast_to(token.reshape(1, 1, d), (n, 1, d)), tokens], axis=1)


def token_mean(x) -> np.ndarray:
    """Average (N, M, d) over the token axis."""
    return as_tensor(x).mean(axis=1)


def global_avg_pool(x) -> np.ndarray:
    """Average (N, C, H, W) over the spatial axes."""
    return as_tensor(x).mean(axis=(2, 3))


def sqrt(x) -> np.ndarray:
    return np.sqrt(as_tensor(x))
