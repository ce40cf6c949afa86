"""Convolution primitives on (channels, *spatial) arrays, 2-D or 3-D.

The forward primitive is cross-correlation with zero padding ``k // 2``:
stride 1 keeps the spatial size, stride 2 gives ``ceil(n / 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractViolation, InvalidArgument

ACTIVATIONS = ("relu", "identity")


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, k, k[, k])
    bias: np.ndarray    # (out_ch,)
    stride: int = 1
    activation: str = "relu"

    def __post_init__(self):
        k = self.weight.shape[2:]
        if len(set(k)) != 1:
            raise InvalidArgument("kernels must be cubic")
        if self.stride not in (1, 2):
            raise InvalidArgument("stride must be 1 or 2")
        if k[0] % 2 == 0:
            raise InvalidArgument("kernel size must be odd")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {ACTIVATIONS}")
        if self.bias.shape != (self.weight.shape[0],):
            raise InvalidArgument("bias length must equal out_ch")

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def _im2col(x, k, stride):
    """(C, *S) -> cols (C * k^d, P) and the output spatial shape."""
    d = x.ndim - 1
    p = k // 2
    xp = np.pad(x, [(0, 0)] + [(p, p)] * d)
    win = sliding_window_view(xp, (k,) * d, axis=tuple(range(1, d + 1)))
    if stride > 1:
        win = win[(slice(None),) + (slice(None, None, stride),) * d]
    out_shape = win.shape[1:1 + d]
    # (C, *S_out, *K) -> (C, *K, *S_out)
    perm = (0,) + tuple(range(1 + d, 1 + 2 * d)) + tuple(range(1, 1 + d))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(x.shape[0] * k ** d, -1)
    return cols, out_shape


def _col2im(cols, in_shape, k, stride, out_shape):
    """Adjoint of ``_im2col``: scatter-add columns back onto the input grid."""
    c = in_shape[0]
    d = len(in_shape) - 1
    p = k // 2
    padded = (c,) + tuple(n + 2 * p for n in in_shape[1:])
    xp = np.zeros(padded, dtype=cols.dtype)
    cols = cols.reshape((c,) + (k,) * d + tuple(out_shape))
    for off in np.ndindex(*(k,) * d):
        dst = (slice(None),) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_shape))
        xp[dst] += cols[(slice(None),) + off]
    crop = (slice(None),) + tuple(slice(p, p + n) for n in in_shape[1:])
    return xp[crop]


def conv_preactivation(x: np.ndarray, layer: ConvLayer):
    if x.ndim != layer.weight.ndim - 1:
        raise InvalidArgument(f"input rank {x.ndim} does not match layer rank")
    if x.shape[0] != layer.in_ch:
        raise InvalidArgument(f"input has {x.shape[0]} channels, layer expects {layer.in_ch}")
    cols, out_shape = _im2col(x, layer.k, layer.stride)
    y = layer.weight.reshape(layer.out_ch, -1) @ cols
    y += layer.bias[:, None]
    return y.reshape((layer.out_ch,) + tuple(out_shape))


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """``act(W * x + b)``."""
    y = conv_preactivation(x, layer)
    if layer.activation == "relu":
        np.maximum(y, 0.0, out=y)
    return y


def conv_backward(x, layer: ConvLayer, grad_out, out=None, need_input_grad: bool = True):
    """Gradients of a scalar loss through one layer.

    ``x`` is the cached input featuremap and ``out`` the cached output (used
    for the ReLU mask; recomputed when omitted). Returns
    ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is None when not
    requested.
    """
    if x is None:
        raise ContractViolation("conv_backward called without the cached input featuremap")
    if layer.activation == "relu":
        if out is None:
            out = conv_forward(x, layer)
        g = grad_out * (out > 0)
    else:
        g = grad_out
    o = layer.out_ch
    g2 = g.reshape(o, -1)
    cols, out_shape = _im2col(x, layer.k, layer.stride)
    if tuple(out_shape) != g.shape[1:]:
        raise InvalidArgument("grad_out shape does not match the forward output")
    grad_w = (g2 @ cols.T).reshape(layer.weight.shape)
    grad_b = g2.sum(axis=1)
    grad_x = None
    if need_input_grad:
        dcols = layer.weight.reshape(o, -1).T @ g2
        grad_x = _col2im(dcols, x.shape, layer.k, layer.stride, out_shape)
    return grad_x, grad_w, grad_b


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    for a in range(1, x.ndim):
        x = np.repeat(x, factor, axis=a)
    return x


def upsample_nearest_backward(g: np.ndarray, factor: int = 2) -> np.ndarray:
    d = g.ndim - 1
    shape = [g.shape[0]]
    for n in g.shape[1:]:
        shape += [n // factor, factor]
    g = g.reshape(shape)
    return g.sum(axis=tuple(2 + 2 * i for i in range(d)))
