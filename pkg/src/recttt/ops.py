"""Differentiable operations.

Each op kind registers a forward function ``(*values, **attrs) -> (out, ctx)``
and a gradient rule ``(ctx, g, needs) -> input grads``.  The thin wrappers at
the bottom of each section are what model code calls.  Images are NCHW.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Var, register, stop_gradient  # noqa: F401  (re-exported)
from .tensor import ShapeError

try:  # optional accelerated convolution kernels
    import torch
    import torch.nn.functional as _TF
    from torch.nn.grad import conv2d_input as _conv2d_input, conv2d_weight as _conv2d_weight
except ImportError:  # pragma: no cover
    torch = None

CONV_BACKENDS = ("numpy", "torch")
_conv_backend = "torch" if torch is not None else "numpy"


def set_conv_backend(name: str) -> str:
    """Select the convolution kernel; returns the previous backend.

    ``numpy`` is the reference im2col implementation; ``torch`` only swaps
    the inner kernels, the op and its gradient rule stay the same.
    """
    global _conv_backend
    if name not in CONV_BACKENDS:
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch is not installed")
    prev, _conv_backend = _conv_backend, name
    return prev


def conv_backend() -> str:
    return _conv_backend

F64 = np.float64


def _same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def _add_fwd(a, b):
    _same(a, b, "add")
    return a + b, None


def _add_rule(ctx, g, needs):
    return g, g


def _sub_fwd(a, b):
    _same(a, b, "sub")
    return a - b, None


def _sub_rule(ctx, g, needs):
    return g, (-g if needs[1] else None)


def _mul_fwd(a, b):
    _same(a, b, "mul")
    return a * b, (a, b)


def _mul_rule(ctx, g, needs):
    a, b = ctx
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _div_fwd(a, b):
    _same(a, b, "div")
    return a / b, (a, b)


def _div_rule(ctx, g, needs):
    a, b = ctx
    ga = g / b if needs[0] else None
    gb = -g * a / (b * b) if needs[1] else None
    return ga, gb


def _scale_fwd(a, *, s):
    return (a * s).astype(a.dtype, copy=False), s


def _scale_rule(s, g, needs):
    return ((g * s).astype(g.dtype, copy=False),)


def _relu_fwd(a):
    mask = a > 0
    return a * mask, mask


def _relu_rule(mask, g, needs):
    return (g * mask,)


def _clamp_min_fwd(a, *, lo):
    mask = a > lo
    return np.where(mask, a, np.asarray(lo, a.dtype)), mask


def _clamp_min_rule(mask, g, needs):
    return (g * mask,)


def _log_fwd(a):
    return np.log(a), a


def _log_rule(a, g, needs):
    return (g / a,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_rule(out, g, needs):
    return (g * out,)


def _identity_fwd(a):
    return a, None


register("add", _add_fwd, _add_rule)
register("sub", _sub_fwd, _sub_rule)
register("mul", _mul_fwd, _mul_rule)
register("div", _div_fwd, _div_rule)
register("scale", _scale_fwd, _scale_rule)
register("relu", _relu_fwd, _relu_rule)
register("clamp_min", _clamp_min_fwd, _clamp_min_rule)
register("log", _log_fwd, _log_rule)
register("exp", _exp_fwd, _exp_rule)
register("stop_gradient", _identity_fwd, lambda ctx, g, needs: (None,))


def add(a: Var, b: Var) -> Var:
    return a.graph.record("add", [a, b])


def sub(a: Var, b: Var) -> Var:
    return a.graph.record("sub", [a, b])


def mul(a: Var, b: Var) -> Var:
    return a.graph.record("mul", [a, b])


def div(a: Var, b: Var) -> Var:
    return a.graph.record("div", [a, b])


def scale(a: Var, s: float) -> Var:
    return a.graph.record("scale", [a], s=float(s))


def relu(a: Var) -> Var:
    return a.graph.record("relu", [a])


def clamp_min(a: Var, lo: float) -> Var:
    return a.graph.record("clamp_min", [a], lo=float(lo))


def log(a: Var) -> Var:
    return a.graph.record("log", [a])


def exp(a: Var) -> Var:
    return a.graph.record("exp", [a])


# -- reductions and inner products -----------------------------------------

def _sum_fwd(a):
    return np.asarray(np.sum(a, dtype=F64), a.dtype), (a.shape, a.dtype)


def _sum_rule(ctx, g, needs):
    shape, dtype = ctx
    return (np.full(shape, g.reshape(()), dtype),)


def _mean_fwd(a):
    return np.asarray(np.mean(a, dtype=F64), a.dtype), (a.shape, a.dtype)


def _mean_rule(ctx, g, needs):
    shape, dtype = ctx
    return (np.full(shape, g.reshape(()) / np.prod(shape), dtype),)


def _rows(a):
    return a.reshape(a.shape[0], -1)


def _dot_fwd(a, b, *, rowwise):
    if a.size != b.size or (rowwise and a.shape[0] != b.shape[0]):
        raise ShapeError(f"dot: incompatible {a.shape} and {b.shape}")
    if rowwise:
        out = np.einsum("ij,ij->i", _rows(a).astype(F64), _rows(b).astype(F64))
    else:
        out = np.dot(a.ravel().astype(F64), b.ravel().astype(F64))
    return np.asarray(out, a.dtype), (a, b, rowwise)


def _dot_rule(ctx, g, needs):
    a, b, rowwise = ctx
    gb = g.reshape((-1,) + (1,) * (a.ndim - 1)) if rowwise else g.reshape(())
    return (gb * b if needs[0] else None), (gb * a if needs[1] else None)


def _norm2_fwd(a, *, rowwise):
    if rowwise:
        out = np.sqrt(np.einsum("ij,ij->i", _rows(a).astype(F64), _rows(a).astype(F64)))
    else:
        out = np.sqrt(np.dot(a.ravel().astype(F64), a.ravel().astype(F64)))
    out = np.asarray(out, a.dtype)
    return out, (a, out, rowwise)


def _norm2_rule(ctx, g, needs):
    a, n, rowwise = ctx
    safe = np.where(n > 0, n, 1).astype(a.dtype)
    coef = np.where(n > 0, g / safe, 0).astype(a.dtype)
    if rowwise:
        coef = coef.reshape((-1,) + (1,) * (a.ndim - 1))
    return (coef * a,)


register("sum", _sum_fwd, _sum_rule)
register("mean", _mean_fwd, _mean_rule)
register("dot", _dot_fwd, _dot_rule)
register("norm2", _norm2_fwd, _norm2_rule)


def sum(a: Var) -> Var:  # noqa: A001
    return a.graph.record("sum", [a])


def mean(a: Var) -> Var:
    return a.graph.record("mean", [a])


def dot(a: Var, b: Var, rowwise: bool = False) -> Var:
    """Inner product of the flattened inputs; ``rowwise`` keeps the leading axis."""
    return a.graph.record("dot", [a, b], rowwise=rowwise)


def norm2(a: Var, rowwise: bool = False) -> Var:
    return a.graph.record("norm2", [a], rowwise=rowwise)


# -- shape ops ---------------------------------------------------------------

def _reshape_fwd(a, *, shape):
    return a.reshape(shape), a.shape


def _reshape_rule(shape, g, needs):
    return (g.reshape(shape),)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), ([x.shape[axis] for x in xs], axis)


def _concat_rule(ctx, g, needs):
    sizes, axis = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _upsample2x_fwd(x):
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def _upsample2x_rule(ctx, g, needs):
    n, c, h, w = g.shape
    return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def _avgpool2d_fwd(x, *, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: {h}x{w} not divisible by {k}")
    out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=F64).astype(x.dtype)
    return out, k


def _avgpool2d_rule(k, g, needs):
    up = g.repeat(k, axis=2).repeat(k, axis=3)
    return (up / np.asarray(k * k, g.dtype),)


register("reshape", _reshape_fwd, _reshape_rule)
register("concat", _concat_fwd, _concat_rule)
register("upsample2x", _upsample2x_fwd, _upsample2x_rule)
register("avgpool2d", _avgpool2d_fwd, _avgpool2d_rule)


def reshape(a: Var, shape: Sequence[int]) -> Var:
    return a.graph.record("reshape", [a], shape=tuple(shape))


def flatten(a: Var) -> Var:
    """Collapse everything after the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    return xs[0].graph.record("concat", list(xs), axis=axis)


def upsample2x(x: Var) -> Var:
    return x.graph.record("upsample2x", [x])


def avgpool2d(x: Var, k: int) -> Var:
    return x.graph.record("avgpool2d", [x], k=int(k))


def global_avgpool(x: Var) -> Var:
    """NCHW -> NC by averaging the full spatial extent."""
    if x.shape[2] != x.shape[3]:
        raise ShapeError("global_avgpool expects square maps")
    return flatten(avgpool2d(x, x.shape[2]))


# -- dense algebra -------------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, (a, b)


def _matmul_rule(ctx, g, needs):
    a, b = ctx
    return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)


def _linear_fwd(x, w, b):
    if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def _linear_rule(ctx, g, needs):
    x, w = ctx
    gx = g @ w if needs[0] else None
    gw = g.T @ x if needs[1] else None
    gb = g.sum(axis=0, dtype=F64).astype(g.dtype) if needs[2] else None
    return gx, gw, gb


register("matmul", _matmul_fwd, _matmul_rule)
register("linear", _linear_fwd, _linear_rule)


def matmul(a: Var, b: Var) -> Var:
    return a.graph.record("matmul", [a, b])


def linear(x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    return x.graph.record("linear", [x, w, b])


# -- convolution -----------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Patches laid out (N, C*kh*kw, Ho*Wo) so a batched matmul yields NCHW directly."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _conv2d_fwd(x, w, b, *, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {w.shape}")
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} for {o} output channels")
    if _conv_backend == "torch":
        tx, tw = torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(np.ascontiguousarray(w))
        out = _TF.conv2d(tx, tw, torch.from_numpy(b), stride=stride, padding=padding).numpy()
        return out, ("torch", tx, tw, stride, padding)
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    wmat = w.reshape(o, -1)
    out = wmat @ cols
    out += b.reshape(1, o, 1)
    return out.reshape(x.shape[0], o, ho, wo), (cols, wmat, x.shape, w.shape, stride, padding)


def _conv2d_rule(ctx, g, needs):
    if isinstance(ctx[0], str):
        return _conv2d_rule_torch(ctx, g, needs)
    cols, wmat, xshape, wshape, stride, pad = ctx
    n, c, h, w = xshape
    o, _, kh, kw = wshape
    ho, wo = g.shape[2], g.shape[3]
    g3 = g.reshape(n, o, ho * wo)
    gx = gw = gb = None
    if needs[1]:
        gw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)
    if needs[2]:
        gb = g3.sum(axis=(0, 2), dtype=F64).astype(g.dtype)
    if needs[0]:
        dcols = (wmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return gx, gw, gb


def _conv2d_rule_torch(ctx, g, needs):
    _, tx, tw, stride, pad = ctx
    tg = torch.from_numpy(np.ascontiguousarray(g))
    gx = _conv2d_input(tx.shape, tw, tg, stride=stride, padding=pad).numpy() if needs[0] else None
    gw = _conv2d_weight(tx, tw.shape, tg, stride=stride, padding=pad).numpy() if needs[1] else None
    gb = channel_sum(g).astype(g.dtype) if needs[2] else None
    return gx, gw, gb


register("conv2d", _conv2d_fwd, _conv2d_rule)


def conv2d(x: Var, w: Var, b: Var, stride: int = 1, padding: int = 0) -> Var:
    return x.graph.record("conv2d", [x, w, b], stride=int(stride), padding=int(padding))


# -- batch normalization ------------------------------------------------------------

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects NC or NCHW, got {x.shape}")


def channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel sum of an NC or NCHW array: float32 inner sums, float64 across the batch."""
    if a.ndim == 4:
        n, c = a.shape[:2]
        inner = a.reshape(n, c, -1) @ np.ones(a.shape[2] * a.shape[3], a.dtype)
        return inner.sum(axis=0, dtype=F64)
    return a.sum(axis=0, dtype=F64)


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance, accumulated in float64."""
    _, bshape = _bn_axes(x)
    m = x.size // x.shape[1]
    mu = channel_sum(x) / m
    centered = x - mu.astype(x.dtype).reshape(bshape)
    var = channel_sum(np.square(centered)) / m
    return mu, var


def _batchnorm_fwd(x, gamma, beta, *, mean, var, eps, batch_stats):
    axes, bshape = _bn_axes(x)
    if gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: {x.shape[1]} channels, gamma {gamma.shape}")
    inv = (1.0 / np.sqrt(np.asarray(var, F64) + eps)).astype(x.dtype).reshape(bshape)
    mu = np.asarray(mean, x.dtype).reshape(bshape)
    xhat = (x - mu) * inv
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv, gamma.reshape(bshape), axes, batch_stats)


def _batchnorm_rule(ctx, g, needs):
    xhat, inv, gamma, axes, batch_stats = ctx
    bshape = inv.shape
    sum_g = channel_sum(g)
    sum_gx = channel_sum(g * xhat)
    gbeta = sum_g.astype(g.dtype) if needs[2] else None
    ggamma = sum_gx.astype(g.dtype) if needs[1] else None
    gx = None
    if needs[0]:
        if batch_stats:
            m = g.size // g.shape[1]
            # dxhat = g * gamma, so its channel sums are gamma times those of g
            s1 = (sum_g.reshape(bshape) * gamma / m).astype(g.dtype)
            s2 = (sum_gx.reshape(bshape) * gamma / m).astype(g.dtype)
            gx = inv * (g * gamma - s1 - xhat * s2)
        else:
            gx = g * (gamma * inv)
    return gx, ggamma, gbeta


register("batchnorm", _batchnorm_fwd, _batchnorm_rule)


def batchnorm(x: Var, gamma: Var, beta: Var, mean: np.ndarray | None = None,
              var: np.ndarray | None = None, eps: float = 1e-5, batch_stats: bool = True) -> Var:
    """Normalize with per-channel statistics.

    ``batch_stats=True`` declares that ``mean``/``var`` were computed from
    ``x`` itself (they are computed here when omitted), so the gradient flows
    through them; otherwise they are constants (running statistics).
    """
    if mean is None or var is None:
        if not batch_stats:
            raise ValueError("batchnorm with running statistics needs mean and var")
        mean, var = batch_moments(x.value)
    return x.graph.record("batchnorm", [x, gamma, beta], mean=mean, var=var, eps=float(eps),
                          batch_stats=bool(batch_stats))


# -- softmax family ---------------------------------------------------------------

def _softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _softmax_rule(y, g, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return out, out


def _log_softmax_rule(out, g, needs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


register("softmax", _softmax_fwd, _softmax_rule)
register("log_softmax", _log_softmax_fwd, _log_softmax_rule)


def softmax(a: Var) -> Var:
    return a.graph.record("softmax", [a])


def log_softmax(a: Var) -> Var:
    return a.graph.record("log_softmax", [a])
