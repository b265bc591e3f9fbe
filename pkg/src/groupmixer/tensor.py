"""
Dense tensor kernels.

Every tensor in the engine is a C-contiguous ``numpy.ndarray`` in row-major
``(N, C, H, W)`` layout. Training runs in float32; float64 is used only for
finite-difference gradient verification. All kernels preserve the dtype of
their inputs and never mutate them.

Forward kernels come with matching ``*_backward`` kernels that the autodiff
layer wires into its tape.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64


def tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a contiguous tensor, rejecting zero-sized dimensions."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy's PCG64 bit generator seeded with ``seed``.

    PCG64 output is specified bit-for-bit by numpy, so a seed reproduces the same
    draws on every platform.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def _check_ndim(x: Tensor, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 4:
        raise DimensionError(f"conv2d input must be 4-D (N, C, H, W), got {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise DimensionError(f"conv2d weight must be 4-D (Cout, Cin/G, Kh, Kw), got {tuple(w_shape)}")
    if stride < 1 or padding < 0 or groups < 1:
        raise DimensionError(f"invalid stride={stride}, padding={padding}, groups={groups}")
    n, cin, h, w = x_shape
    cout, cin_g, kh, kw = w_shape
    if cin % groups:
        raise DimensionError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise DimensionError(f"output channels {cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g} channels per group, input provides {cin // groups} "
            f"({cin} channels / {groups} groups)"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}"
        )
    return n, cin, cout, cin_g, kh, kw, ho, wo


def _im2col(x, kh, kw, stride, padding, groups, ho, wo):
    """Patches as (N, G, Ho*Wo, Cin_g*Kh*Kw)."""
    n, cin = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cin_g = cin // groups
    win = win.reshape(n, groups, cin_g, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    return win.reshape(n, groups, ho * wo, cin_g * kh * kw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``groups == Cin == Cout`` gives a depthwise convolution, a 1x1 kernel a
    pointwise one.
    """
    n, cin, cout, cin_g, kh, kw, ho, wo = _conv_geometry(
        x.shape, weight.shape, stride, padding, groups
    )
    cols = _im2col(x, kh, kw, stride, padding, groups, ho, wo)
    wmat = weight.reshape(groups, cout // groups, cin_g * kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # (N, G, Ho*Wo, Cout_g)
    out = out.transpose(0, 1, 3, 2).reshape(n, cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.reshape(1, cout, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(
    grad_out: Tensor,
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    n, cin, cout, cin_g, kh, kw, ho, wo = _conv_geometry(
        x.shape, weight.shape, stride, padding, groups
    )
    if grad_out.shape != (n, cout, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, cout, ho, wo)}")
    cout_g = cout // groups
    cols = _im2col(x, kh, kw, stride, padding, groups, ho, wo)
    g = grad_out.reshape(n, groups, cout_g, ho * wo)

    grad_w = np.matmul(g, cols).sum(axis=0).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    wmat = weight.reshape(groups, cout_g, cin_g * kh * kw)
    dcols = np.matmul(g.transpose(0, 1, 3, 2), wmat)  # (N, G, Ho*Wo, Cin_g*Kh*Kw)
    dcols = dcols.reshape(n, groups, ho, wo, cin_g, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3)
    dcols = dcols.reshape(n, cin, kh, kw, ho, wo)

    h, w = x.shape[2:]
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dcols[:, :, i, j]
    grad_x = dxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# channel reshuffling and pooling
# ---------------------------------------------------------------------------

def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: output channel ``j*g + i`` is input ``i*(C/g) + j``."""
    _check_ndim(x, 4, "channel_shuffle input")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise DimensionError(f"channels {c} not divisible by groups {groups}")
    out = x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out.reshape(n, c, h, w))


def channel_shuffle_backward(grad_out: Tensor, groups: int) -> Tensor:
    # the inverse permutation of a g-shuffle is a (C/g)-shuffle
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_ndim(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: Tensor, input_shape) -> Tensor:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, c)}")
    scale = grad_out.dtype.type(1.0 / (h * w))
    g = (grad_out * scale).reshape(n, c, 1, 1)
    return np.ascontiguousarray(np.broadcast_to(g, input_shape))


# ---------------------------------------------------------------------------
# elementwise and linear kernels
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return a * b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    # subgradient at exactly 0 is taken as 0
    return grad_out * (x > 0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return np.matmul(a, b)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return np.ascontiguousarray(np.transpose(x, axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None


def pad(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes."""
    if padding < 0:
        raise DimensionError(f"padding must be non-negative, got {padding}")
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding)] * 2
    return np.pad(x, widths)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.mean(axis=axis, keepdims=keepdims)


def var(x: Tensor, axis=None, keepdims: bool = False, ddof: int = 0) -> Tensor:
    return x.var(axis=axis, keepdims=keepdims, ddof=ddof)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
