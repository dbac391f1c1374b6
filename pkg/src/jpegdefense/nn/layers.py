"""Layer descriptors and their forward/backward kernels.

Activations are channels-last: ``(N, H, W, C)`` for feature maps and
``(N, D)`` after :class:`Flatten`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Conv:
    """3x3 convolution, stride 1, zero "same" padding."""

    filters: int
    kernel: int = 3


@dataclass(frozen=True)
class MaxPool:
    """Max pooling with "same" padding: output extent is ``ceil(n / stride)``."""

    size: int
    stride: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Conv | MaxPool | ReLU | Dropout | Flatten | Dense | Softmax


def output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-example output shape of ``layer`` given its per-example input shape."""
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ValueError(f"Conv expects (H, W, C) input, got {shape}")
        return (shape[0], shape[1], layer.filters)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ValueError(f"MaxPool expects (H, W, C) input, got {shape}")
        h, w, c = shape
        return (-(-h // layer.stride), -(-w // layer.stride), c)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ValueError(f"Dense expects flat input, got {shape}")
        return (layer.units,)
    return shape


def param_shapes(layer: Layer, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if isinstance(layer, Conv):
        k = layer.kernel
        return {"w": (k * k * in_shape[2], layer.filters), "b": (layer.filters,)}
    if isinstance(layer, Dense):
        return {"w": (in_shape[0], layer.units), "b": (layer.units,)}
    return {}


# -- convolution ----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = [xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=-1)  # (N, H, W, k*k*C)


def _col2im(dcols: np.ndarray, k: int, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    idx = 0
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[..., idx * c:(idx + 1) * c]
            idx += 1
    return dxp[:, p:p + h, p:p + w, :]


def conv_forward(x, w, b, k):
    cols = _im2col(x, k)
    return cols @ w + b, cols


def conv_backward(dout, cols, w, k, c, need_input=True):
    n, h, wd, f = dout.shape
    flat = dout.reshape(-1, f)
    dw = cols.reshape(-1, cols.shape[-1]).T @ flat
    db = flat.sum(axis=0)
    dx = conv_input_grad(dout, w, k, c) if need_input else None
    return dx, dw, db


def conv_input_grad(dout, w, k, c):
    return _col2im(dout @ w.T, k, c)


# -- pooling --------------------------------------------------------------------

def _pool_geometry(n: int, size: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + size - n, 0)
    return out, total // 2, total - total // 2


def pool_forward(x, size, stride):
    n, h, w, c = x.shape
    oh, top, bottom = _pool_geometry(h, size, stride)
    ow, left, right = _pool_geometry(w, size, stride)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=-np.inf)
    windows = np.stack([
        xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :]
        for i in range(size) for j in range(size)
    ])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]
    return out, (arg, xp.shape, top, left, h, w)


def pool_backward(dout, cache, size, stride):
    arg, padded_shape, top, left, h, w = cache
    oh, ow = dout.shape[1:3]
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    idx = 0
    for i in range(size):
        for j in range(size):
            # within one offset the strided targets are distinct, so += is safe
            dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += (
                dout * (arg == idx)
            )
            idx += 1
    return dxp[:, top:top + h, left:left + w, :]


# -- softmax --------------------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
