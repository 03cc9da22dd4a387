"""Differentiable operators on :class:`Tensor`.

Every function takes tensors (or array-likes, which are wrapped as constants)
and returns a new tensor whose backward closure returns one gradient per
parent, in parent order.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor

LAYERNORM_EPS = 1e-5


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return Tensor._make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact error-function CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._make(out, (a,), backward)


# -- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / count)


def max(a, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        return (full,)

    return Tensor._make(out, (a,), backward)


# -- shape ------------------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(out, ts, backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., p, q] @ [..., q, r]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} @ {b.shape} (inner extents {a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# -- normalisation and probabilities ---------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layernorm(x, gain, bias, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layernorm affine extents {gain.shape}/{bias.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = g * gain.data
        d = x.shape[-1]
        dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gain, bias), backward)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits shape {logits.shape} does not match {labels.shape[0]} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


# -- convolution ------------------------------------------------------------


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation.

    ``x`` is ``[C_in, D, H, W]`` or batched ``[N, C_in, D, H, W]``; ``weight``
    is ``[C_out, C_in, k, k, k]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 4
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects [N,C,D,H,W] input and 5-d weight, got {x.shape}, {weight.shape}")
    n, cin, *spatial = x.shape
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv3d channel mismatch: input has {cin}, weight expects {wcin}")
    padded = [s + 2 * padding for s in spatial]
    if any(k > p for k, p in zip((kd, kh, kw), padded)):
        raise ValueError(f"conv3d kernel {(kd, kh, kw)} larger than padded input {tuple(padded)}")
    od, oh, ow = ((p - k) // stride + 1 for p, k in zip(padded, (kd, kh, kw)))

    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x.data
    # Channel-major im2col: cols[C_in, kd, kh, kw, N, od, oh, ow], filled one
    # kernel offset at a time (contiguous block copies).
    xt = xp.transpose(1, 0, 2, 3, 4)
    cols = np.empty((cin, kd, kh, kw, n, od, oh, ow), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, a, b, c] = xt[
                    :,
                    :,
                    a : a + stride * od : stride,
                    b : b + stride * oh : stride,
                    c : c + stride * ow : stride,
                ]
    cols = cols.reshape(cin * kd * kh * kw, n * od * oh * ow)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, od, oh, ow)
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(cout, 1, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        dw = (gt @ cols.T).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(cin, kd, kh, kw, n, od, oh, ow)
            dxp = np.zeros((cin, n) + xp.shape[2:], dtype=xp.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        dxp[
                            :,
                            :,
                            a : a + stride * od : stride,
                            b : b + stride * oh : stride,
                            c : c + stride * ow : stride,
                        ] += dcols[:, a, b, c]
            dx = dxp[:, :, padding : padding + spatial[0], padding : padding + spatial[1], padding : padding + spatial[2]]
            dx = dx.transpose(1, 0, 2, 3, 4)
        if bias is None:
            return dx, dw
        return dx, dw, gt.sum(axis=1)

    result = Tensor._make(out, parents, backward)
    return reshape(result, result.shape[1:]) if unbatched else result


# -- operator sugar ---------------------------------------------------------

Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: mul(a, b)
Tensor.__rmul__ = lambda a, b: mul(b, a)
Tensor.__truediv__ = lambda a, b: div(a, b)
Tensor.__rtruediv__ = lambda a, b: div(b, a)
Tensor.__neg__ = lambda a: neg(a)
Tensor.__pow__ = lambda a, p: power(a, p)
Tensor.__matmul__ = lambda a, b: matmul(a, b)
Tensor.__getitem__ = lambda a, idx: getitem(a, idx)
Tensor.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
Tensor.transpose = lambda a, *axes: transpose(a, axes or None)
Tensor.T = property(lambda a: transpose(a))
