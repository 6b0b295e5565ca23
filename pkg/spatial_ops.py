"""Spatial operators on N x C x H x W tensors, all tape-recorded."""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, UsageError
from tensor_core import Tensor, apply, as_tensor


@dataclass(frozen=True)
class RollOffset:
    dh: int
    dw: int

    def __neg__(self):
        return RollOffset(-self.dh, -self.dw)

    @classmethod
    def of(cls, value):
        if isinstance(value, RollOffset):
            return value
        dh, dw = value
        return cls(int(dh), int(dw))


@dataclass(frozen=True)
class ConvContext:
    """What conv2d saves for its backward pass."""
    input: np.ndarray
    weight: np.ndarray
    has_bias: bool
    stride: int
    padding: int
    columns: Optional[np.ndarray] = None  # im2col matrix of the forward pass


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(x, kh, kw, stride, padding):
    """Rows are (n, i, j) output positions, columns (c, di, dj) kernel taps."""
    win = _windows(x, kh, kw, stride, padding)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _check_conv(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d: invalid stride {stride} or padding {padding}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")


def _conv_grads(g, saved, need_input=True, need_weight=True):
    x, w, s, p = saved.input, saved.weight, saved.stride, saved.padding
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    expected = (n, o, conv_output_size(h, kh, s, p), conv_output_size(wd, kw, s, p))
    if g.shape != expected:
        raise DimensionError(f"conv2d_backward: grad_output {g.shape}, expected {expected}")
    ho, wo = g.shape[2:]
    rows = g.transpose(0, 2, 3, 1).reshape(-1, o)

    grad_input = grad_weight = None
    if need_weight:
        columns = saved.columns if saved.columns is not None else _im2col(x, kh, kw, s, p)
        grad_weight = (rows.T @ columns).reshape(w.shape)
    if need_input:
        taps = (rows @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        padded = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=taps.dtype)
        for i in range(kh):
            for j in range(kw):
                # col2im scatter of one kernel tap
                padded[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    taps[..., i, j].transpose(0, 3, 1, 2)
        grad_input = np.ascontiguousarray(padded[:, :, p:p + h, p:p + wd])
    grad_bias = g.sum(axis=(0, 2, 3)) if saved.has_bias else None
    return grad_input, grad_weight, grad_bias


def conv2d(input, weight, bias=None, stride=1, padding=0):
    """Cross-correlation (no kernel flip), the deep-learning framework convention."""
    input, weight = as_tensor(input), as_tensor(weight)
    x, w = input.data, weight.data
    _check_conv(x, w, stride, padding)
    n, o = x.shape[0], w.shape[0]
    kh, kw = w.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)

    columns = _im2col(x, kh, kw, stride, padding)
    out = (columns @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (input, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias {bias.shape} for {o} output channels")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    need_input, need_weight = input.tape is not None, weight.tape is not None
    if not (need_input or need_weight or (bias is not None and bias.tape is not None)):
        return Tensor(np.ascontiguousarray(out))
    saved = ConvContext(x, w, bias is not None, stride, padding, columns if need_weight else None)

    def vjp(g):
        return _conv_grads(g, saved, need_input, need_weight)

    return apply("conv2d", np.ascontiguousarray(out), parents, vjp)


def conv2d_backward(grad_output, saved):
    """Adjoint of conv2d: (grad_input, grad_weight, grad_bias or None)."""
    g = grad_output.data if isinstance(grad_output, Tensor) else np.asarray(grad_output)
    grad_input, grad_weight, grad_bias = _conv_grads(g, saved)
    return (Tensor(grad_input), Tensor(grad_weight),
            Tensor(grad_bias) if grad_bias is not None else None)


def roll2d(t, offset):
    """out[..., i, j] = t[..., (i - dh) mod H, (j - dw) mod W]."""
    t = as_tensor(t)
    offset = RollOffset.of(offset)
    if t.ndim < 2:
        raise DimensionError(f"roll2d needs at least 2 dims, got {t.shape}")
    out = np.roll(t.data, (offset.dh, offset.dw), axis=(-2, -1))
    return apply("roll2d", out, (t,),
                 lambda g: (np.roll(g, (-offset.dh, -offset.dw), axis=(-2, -1)),))


def _check_even(t, op):
    if t.ndim < 2:
        raise DimensionError(f"{op} needs at least 2 dims, got {t.shape}")
    h, w = t.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"{op} needs even spatial extents, got {h}x{w}")
    return h, w


def bilinear_down2x(t):
    """Align-corners-false bilinear reduction by exactly 2: the 2x2 block mean."""
    t = as_tensor(t)
    h, w = _check_even(t, "bilinear_down2x")
    lead = t.shape[:-2]
    out = t.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * g.dtype.type(0.25),)

    return apply("bilinear_down2x", out, (t,), vjp)


avg_pool_2x = bilinear_down2x


def max_pool_2x(t):
    t = as_tensor(t)
    h, w = _check_even(t, "max_pool_2x")
    lead = t.shape[:-2]
    blocks = t.data.reshape(lead + (h // 2, 2, w // 2, 2)).swapaxes(-3, -2)
    blocks = blocks.reshape(lead + (h // 2, w // 2, 4))
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def vjp(g):
        grad = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(grad, index, g[..., None], axis=-1)
        grad = grad.reshape(lead + (h // 2, w // 2, 2, 2)).swapaxes(-3, -2)
        return (grad.reshape(t.shape),)

    return apply("max_pool_2x", out, (t,), vjp)


@lru_cache(maxsize=64)
def _interp_matrix(n_in, n_out):
    # align_corners=False source coordinates, clamped at the low edge
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        matrix[o, i0] += 1.0 - frac
        matrix[o, i1] += frac
    matrix.flags.writeable = False
    return matrix


def _separable(t, rows, cols, op):
    rows = rows.astype(t.dtype)
    cols = cols.astype(t.dtype)
    out = rows @ t.data @ cols.T
    return apply(op, out, (t,), lambda g: (rows.T @ g @ cols,))


def bilinear_upsample(t, size):
    """Resize the last two axes to `size` = (H, W), align-corners-false."""
    t = as_tensor(t)
    if t.ndim < 2:
        raise DimensionError(f"bilinear_upsample needs at least 2 dims, got {t.shape}")
    h, w = t.shape[-2:]
    return _separable(t, _interp_matrix(h, size[0]), _interp_matrix(w, size[1]), "bilinear_upsample")


def gaussian_kernel(kernel_size, sigma):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise UsageError(f"gaussian kernel size must be odd, got {kernel_size}")
    radius = kernel_size // 2
    taps = np.exp(-(np.arange(-radius, radius + 1) ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n, kernel_size, sigma):
    kernel = gaussian_kernel(kernel_size, sigma)
    radius = kernel_size // 2
    # reflect padding without edge repeat
    source = np.pad(np.arange(n), radius, mode="reflect")
    matrix = np.zeros((n, n))
    for i in range(n):
        for j, weight in enumerate(kernel):
            matrix[i, source[i + j]] += weight
    matrix.flags.writeable = False
    return matrix


def gaussian_blur2d(t, kernel_size=11, sigma=5.0):
    t = as_tensor(t)
    if t.ndim < 2:
        raise DimensionError(f"gaussian_blur2d needs at least 2 dims, got {t.shape}")
    h, w = t.shape[-2:]
    return _separable(t, _blur_matrix(h, kernel_size, float(sigma)),
                      _blur_matrix(w, kernel_size, float(sigma)), "gaussian_blur2d")
