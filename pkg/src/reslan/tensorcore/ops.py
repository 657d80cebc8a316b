"""Differentiable operations. Each returns a new Tensor and records its
backward rule on the active tape."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, constant, make_result

SPARSE_EPS = 1e-8


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _t(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _t(a)
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# --------------------------------------------------------------------------
# reductions and reshaping


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return make_result(out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = _t(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse everything but the batch axis."""
    a = _t(a)
    return reshape(a, (a.shape[0], -1))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# --------------------------------------------------------------------------
# layers


def dense(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with x (N, in), w (out, in), b (out,)."""
    x, w = _t(x), _t(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is None:
        return make_result(x.data @ w.data.T, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    b = _t(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[0]} outputs")
    return make_result(
        x.data @ w.data.T + b.data,
        (x, w, b),
        lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)),
    )


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} features, weight expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    if stride < 1 or padding < 0 or padding >= max(kh, kw):
        raise ConfigError(f"unsupported conv2d stride={stride} padding={padding} for kernel {kh}x{kw}")
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    return kh, kw, ho, wo


def _pad(a: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    pw = ph if pw is None else pw
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else a


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions (n, row, col); columns are (feature, ki, kj)."""
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    o, c, kh, kw = w.shape
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (cols @ w.reshape(o, -1).T).reshape(xp.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight (out, in, kh, kw) and optional bias (out,)."""
    x, w = _t(x), _t(w)
    kh, kw, ho, wo = _check_conv(x, w, stride, padding)
    xp = _pad(x.data, padding)
    out, cols = _correlate(xp, w.data, stride, ho, wo)
    inputs = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} outputs")
        out += b.data[None, :, None, None]
        inputs = (x, w, b)

    def back(g):
        gx = gw = None
        o = w.shape[0]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            n, c, h, wd = x.shape
            if stride == 1:
                # input gradient = full correlation of g with the flipped kernel
                w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gp = _pad(g, kh - 1 - padding, kw - 1 - padding)
                gx, _ = _correlate(gp, w_flip, 1, h, wd)
            else:
                dcols = (g2 @ w.data.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
                dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return make_result(out, inputs, back)


def window_max(m: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Max over every kernel footprint (non-differentiable, used for masks)."""
    mp = _pad(m, padding)
    ho = (mp.shape[2] - kh) // stride + 1
    wo = (mp.shape[3] - kw) // stride + 1
    return _windows(mp, kh, kw, stride)[:, :, :ho, :wo].max(axis=(4, 5))


def sparse_conv2d(x, mask, w, b=None, stride: int = 1, padding: int = 0):
    """Sparsity-normalised convolution.

    ``y = conv(x * m, w) / (conv(m, ones) + eps) + b``, where ``m`` is a
    single-feature binary mask (N, 1, H, W). Returns ``(y, m')`` with the
    mask propagated by a max over each kernel footprint.
    """
    x, w = _t(x), _t(w)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:]:
        raise ShapeError(f"sparse_conv2d: mask {m.shape} does not match input {x.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ShapeError("sparse_conv2d: mask must be binary")
    kh, kw = w.shape[2:]
    num = conv2d(mul(x, constant(m)), w, None, stride, padding)
    ones = np.ones((1, 1, kh, kw))
    count = conv2d(constant(m), constant(ones), None, stride, padding).data
    y = mul(num, constant(1.0 / (count + SPARSE_EPS)))
    if b is not None:
        b = _t(b)
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y, window_max(m, kh, kw, stride, padding)


def _check_pool(x: Tensor, kernel, stride):
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    if stride is not None and stride != kernel:
        raise ConfigError("pooling supports only stride equal to the kernel size")
    if x.ndim != 4:
        raise ShapeError(f"pooling expects a 4D tensor, got {x.shape}")
    if kh < 1 or kw < 1 or kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"pool kernel {kh}x{kw} does not fit input {x.shape[2:]}")
    return kh, kw, x.shape[2] // kh, x.shape[3] // kw


def avgpool2d(x, kernel=2, stride=None) -> Tensor:
    """Non-overlapping average pooling; trailing rows/columns are dropped."""
    x = _t(x)
    kh, kw, ho, wo = _check_pool(x, kernel, stride)
    n, c = x.shape[:2]
    blocks = x.data[:, :, : ho * kh, : wo * kw].reshape(n, c, ho, kh, wo, kw)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * kh, : wo * kw] = np.broadcast_to(
            (g / (kh * kw))[:, :, :, None, :, None], (n, c, ho, kh, wo, kw)
        ).reshape(n, c, ho * kh, wo * kw)
        return (gx,)

    return make_result(blocks.mean(axis=(3, 5)), (x,), back)


def maxpool2d(x, kernel=2, stride=None) -> Tensor:
    """Non-overlapping max pooling; the gradient goes to the first maximum."""
    x = _t(x)
    kh, kw, ho, wo = _check_pool(x, kernel, stride)
    n, c = x.shape[:2]
    blocks = (
        x.data[:, :, : ho * kh, : wo * kw]
        .reshape(n, c, ho, kh, wo, kw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kh * kw)
    )
    arg = blocks.argmax(axis=-1)

    def back(g):
        sel = np.zeros_like(blocks)
        np.put_along_axis(sel, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * kh, : wo * kw] = (
            sel.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        )
        return (gx,)

    return make_result(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], (x,), back)


def upsample2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    x = _t(x)
    if factor < 1:
        raise ConfigError("upsample factor must be >= 1")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return make_result(
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
    )
