"""Differentiable primitives used by the CompNet family.

Activations are NCHW.  Convolutions are lowered to batched GEMMs over
im2col buffers; the buffers are rebuilt during backward instead of being
kept alive, which keeps deep dense networks inside a few GB.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autograd import ShapeError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """Elementwise sum.  Tensor operands must share a shape; python scalars are allowed."""
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (used for channel-broadcast gates)."""
    a, b = _binary_operands(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis), 1.0 / count)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows, unlike 1 / (1 + exp(-x)).
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements, returned as a scalar tensor."""
    a, b = _binary_operands(a, b)
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def backward(g):
        scaled = (2.0 / n) * g * diff
        ga = scaled if a.requires_grad else None
        gb = _unbroadcast(-scaled, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mse")


# ------------------------------------------------------------------ structure

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    extents = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(extents)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return make_result(out, tensors, backward, "concat")


def split(x: Tensor, extents: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat` given the recorded extents."""
    if int(np.sum(extents)) != x.shape[axis]:
        raise ShapeError(f"split extents {list(extents)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for extent in extents:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + extent)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(make_result(x.data[index].copy(), (x,), backward, "split"))
        start += extent
    return outs


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first window element."""
    n, c, h, w = _check_4d(x, "maxpool2")
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        grad = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return make_result(out, (x,), backward, "maxpool2")


# -------------------------------------------------------------- convolutions

def _check_4d(x: Tensor, name: str) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects an NCHW tensor, got shape {x.shape}")
    return x.shape


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    s = xp.strides
    windows = as_strided(xp, (n, c, 3, 3, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False)
    return windows.reshape(n, c * 9, h * w)


def _col2im3(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, 3, 3, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
    return dxp[:, :, 1:-1, 1:-1]


def _conv2d_backward(g, x, weight, need_x, need_w):
    n, c, h, w = x.shape
    f = weight.shape[0]
    g2 = g.reshape(n, f, h * w)
    wm = weight.reshape(f, c * 9)
    dx = dw = None
    if need_w:
        cols = _im2col3(x)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        del cols
    if need_x:
        dx = _col2im3(np.matmul(wm.T, g2), x.shape)
    return dx, dw, g2.sum(axis=(0, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 'same' convolution (zero padding 1, stride 1).

    ``weight`` has shape (F, C, 3, 3); ``bias`` has shape (F,).
    """
    n, c, h, w = _check_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects a (F, C, 3, 3) kernel, got {weight.shape}")
    if weight.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {weight.shape[1]}")
    f = weight.shape[0]
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    out = np.matmul(weight.data.reshape(f, c * 9), _im2col3(x.data))
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, f, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw, db = _conv2d_backward(g, x.data, weight.data, x.requires_grad, weight.requires_grad)
        return (dx, dw) if bias is None else (dx, dw, db)

    return make_result(out, parents, backward, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``weight`` has shape (F, C, 1, 1)."""
    n, c, h, w = _check_4d(x, "conv1x1")
    if weight.ndim != 4 or weight.shape[2:] != (1, 1) or weight.shape[1] != c:
        raise ShapeError(f"conv1x1: kernel {weight.shape} incompatible with input {x.shape}")
    f = weight.shape[0]
    wm = weight.data.reshape(f, c)
    xf = x.data.reshape(n, c, h * w)
    out = np.matmul(wm, xf)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, f, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, f, h * w)
        dx = np.matmul(wm.T, g2).reshape(n, c, h, w) if x.requires_grad else None
        dw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=(0, 2))

    return make_result(out, parents, backward, "conv1x1")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2 transposed convolution with stride 2: exactly doubles H and W.

    ``weight`` has shape (C, F, 2, 2); input pixel (h, w) of channel c writes
    ``x * weight[c, f, i, j]`` to output pixel (2h + i, 2w + j).
    """
    n, c, h, w = _check_4d(x, "conv_transpose2d")
    if stride != 2:
        raise ShapeError(f"conv_transpose2d supports stride 2 only, got {stride}")
    if h <= 0 or w <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive spatial dims {h}x{w}")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2) or weight.shape[0] != c:
        raise ShapeError(f"conv_transpose2d: kernel {weight.shape} incompatible with input {x.shape}")
    f = weight.shape[1]
    wm = weight.data.reshape(c, f * 4)
    xf = x.data.reshape(n, c, h * w)
    y = np.matmul(wm.T, xf).reshape(n, f, 2, 2, h, w)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(n, f, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gy = g.reshape(n, f, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, f * 4, h * w)
        dx = np.matmul(wm, gy).reshape(n, c, h, w) if x.requires_grad else None
        dw = np.matmul(xf, gy.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------- normalizers

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization.

    In train mode the running statistics are updated in place (unbiased
    variance), and the gradient flows through the batch statistics.
    ``calibrate`` behaves like train here; it differs only for dropout.
    """
    n, c, h, w = _check_4d(x, "batchnorm2d")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} for {c} channels")
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv_std).astype(x.dtype)
        shift = (beta.data - running_mean * gamma.data * inv_std).astype(x.dtype)
        xhat = ((x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]).astype(x.dtype)
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

        def backward_eval(g):
            dx = g * scale[None, :, None, None]
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), backward_eval, "batchnorm2d")
    if mode not in ("train", "calibrate"):
        raise ValueError(f"unknown mode {mode!r}")
    m = n * h * w
    if m <= 1:
        raise ShapeError("batchnorm2d: train mode needs more than one value per channel")
    mu = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mu[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            dx = (inv_std / m)[None, :, None, None] * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the identity.

    ``calibrate`` mode is the identity too, so batch-norm statistics gathered
    in that mode match what eval mode sees.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode in ("eval", "calibrate") or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape, dtype=np.float64) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")
