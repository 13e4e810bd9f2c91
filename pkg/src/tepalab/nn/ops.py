"""Differentiable primitives.

Images are NCHW. Heavy ops (convolution, normalization, the loss heads) are
fused: one tape node each with a hand-written backward, which keeps the
Python overhead of a small CNN forward/backward pass to a few dozen nodes.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DegenerateBatchError, ShapeError
from .tensor import Tensor, make_result

NORM_EPS = 1e-5


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Leading-axis slice ``a[lo:hi]``."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        return (full,)

    return make_result(a.data[lo:hi], (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return make_result(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """Direct k x k convolution, zero padding, accumulated over kernel taps."""
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects (N, {w.shape[1]}, H, W), got {x.shape}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = np.zeros((n, ho, wo, o), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            # (n, c, ho, wo) x (o, c) -> (n, ho, wo, o)
            out += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        g_nhwo = g.transpose(0, 2, 3, 1)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gw[:, :, i, j] = np.tensordot(g_nhwo, patch, axes=([0, 1, 2], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    # (n, ho, wo, o) x (o, c) -> (n, ho, wo, c)
                    contrib = np.tensordot(g_nhwo, w.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return make_result(out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C). Works for any spatial extent."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make_result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
    eps: float = NORM_EPS,
    stats_out: dict | None = None,
) -> Tensor:
    """Per-channel normalization over every axis but 1.

    With ``mean``/``var`` given they are treated as constants (stored
    statistics). Otherwise the batch's own biased statistics are used and
    differentiated through; they are written to ``stats_out`` if provided.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mean is None:
        m = x.data.size // x.shape[1]
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch statistics need a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var_b = x.data.var(axis=axes)
        if stats_out is not None:
            stats_out["mean"] = mu
            stats_out["var"] = var_b
        inv = 1.0 / np.sqrt(var_b + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

        def bw(g):
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(bshape)
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            return gx, gg, gb

        return make_result(out, (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(np.asarray(var, dtype=x.dtype) + eps)
    xhat = (x.data - np.asarray(mean, dtype=x.dtype).reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw_fixed(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw_fixed)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = NORM_EPS) -> Tensor:
    """Per-sample normalization over channel groups; batch-size independent."""
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels do not split into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xhat_g).sum(axis=2, keepdims=True)
            gx = ((inv / m) * (m * dxhat - s1 - xhat_g * s2)).reshape(x.shape)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw)


def gather_pixels(x: Tensor, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-sample spatial gather: ``out[n, :, i, j] = x[n, :, rows[n,i,j], cols[n,i,j]]``.

    Positions where ``valid`` is False are zero. Covers nearest-neighbour
    resizing, padding and cropping as one differentiable index map.
    """
    n, c = x.shape[:2]
    nidx = np.arange(n)[:, None, None]
    r = np.where(valid, rows, 0)
    q = np.where(valid, cols, 0)
    vals = x.data[nidx, :, r, q]  # (n, H, W, c)
    vals = np.where(valid[..., None], vals, 0).astype(x.dtype)
    out = np.ascontiguousarray(vals.transpose(0, 3, 1, 2))

    def bw(g):
        gx = np.zeros_like(x.data)
        gv = np.where(valid[..., None], g.transpose(0, 2, 3, 1), 0)
        nn_ = np.broadcast_to(nidx, r.shape)
        np.add.at(gx.transpose(0, 2, 3, 1), (nn_[valid], r[valid], q[valid]), gv[valid])
        return (gx,)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------- softmax & losses

def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: Tensor) -> Tensor:
    p = softmax_np(z.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (z,), bw)


def log_softmax(z: Tensor) -> Tensor:
    ls = log_softmax_np(z.data)
    p = np.exp(ls)
    return make_result(ls, (z,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    ls = log_softmax_np(logits.data)
    per = -ls[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per.sum() * scale if reduction != "none" else per, dtype=logits.dtype)

    def bw(g):
        d = np.exp(ls)
        d[np.arange(n), labels] -= 1.0
        if reduction == "none":
            return (d * g[:, None],)
        return (d * (g * scale),)

    return make_result(out, (logits,), bw)


def entropy(logits: Tensor, reduction: str = "mean") -> Tensor:
    """Shannon entropy of softmax(logits), nats."""
    n = logits.shape[0]
    ls = log_softmax_np(logits.data)
    p = np.exp(ls)
    per = -(p * ls).sum(axis=-1)
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per if reduction == "none" else per.sum() * scale, dtype=logits.dtype)

    def bw(g):
        d = -p * (ls + per[:, None])
        if reduction == "none":
            return (d * g[:, None],)
        return (d * (g * scale),)

    return make_result(out, (logits,), bw)


def gce(logits: Tensor, q: float = 0.8, reduction: str = "mean") -> Tensor:
    """Generalized cross-entropy against the argmax pseudo-label.

    ``(1 - p_hat**q) / q`` per sample; the pseudo-label is a constant.
    """
    if not 0 < q <= 1:
        raise ContractError(f"q must lie in (0, 1], got {q}")
    n = logits.shape[0]
    ls = log_softmax_np(logits.data)
    p = np.exp(ls)
    psi = ls.argmax(axis=-1)
    p_hat_q = np.exp(q * ls[np.arange(n), psi])
    per = (1.0 - p_hat_q) / q
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per if reduction == "none" else per.sum() * scale, dtype=logits.dtype)

    def bw(g):
        onehot = np.zeros_like(p)
        onehot[np.arange(n), psi] = 1.0
        d = -p_hat_q[:, None] * (onehot - p)
        if reduction == "none":
            return (d * g[:, None],)
        return (d * (g * scale),)

    return make_result(out, (logits,), bw)
