"""Differentiable primitives.

Image-shaped ops accept either a single ``C x H x W`` map or a batch
``N x C x H x W``; channels are always axis ``-3``. Convolution is
cross-correlation (no kernel flip) with zero padding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyTensor, NonIntegralOutputSize, ShapeMismatch
from .tensor import Tensor, as_tensor, record


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (x,), x.data * c, lambda g: (g * c,))


def add_n(*xs: Tensor) -> Tensor:
    """Sum of same-shaped tensors in one node."""
    for t in xs[1:]:
        _same_shape(xs[0], t, "add_n")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return record("add_n", xs, out, lambda g: tuple(g for _ in xs))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Flatten every axis except a leading batch axis for 4-D input; fully for 3-D."""
    if x.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return record("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def reduce_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise EmptyTensor("reduce_mean of an empty tensor")
    n = x.size
    shape = x.shape
    return record(
        "reduce_mean", (x,), np.array(x.data.mean()), lambda g: (np.full(shape, g / n),)
    )


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record("reduce_sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, g),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeMismatch(f"concat_channels: bad ranks {a.shape}, {b.shape}")
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeMismatch(f"concat_channels: {a.shape} vs {b.shape}")
    c1 = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)
    return record(
        "concat_channels", (a, b), out, lambda g: (g[..., :c1, :, :], g[..., c1:, :, :])
    )


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"split_channels: bad rank {x.shape}")
    c = x.shape[-3]
    if not 0 < at < c:
        raise ShapeMismatch(f"split_channels: split point {at} outside (0, {c})")
    shape = x.shape

    def routed(lo: int, hi: int):
        def bw(g):
            full = np.zeros(shape)
            full[..., lo:hi, :, :] = g
            return (full,)

        return bw

    head = record("split_head", (x,), x.data[..., :at, :, :].copy(), routed(0, at))
    tail = record("split_tail", (x,), x.data[..., at:, :, :].copy(), routed(at, c))
    return head, tail


# convolution ---------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise NonIntegralOutputSize(
            f"(size {n} + 2*{pad} - kernel {k}) is not a non-negative multiple of stride {stride}"
        )
    return span // stride + 1


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeMismatch(f"expected C x H x W or N x C x H x W, got {x.shape}")


def _im2col(xpad: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns are (c, a, b) patch entries."""
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(
    cols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    """Scatter-add patch gradients back onto a padded ``n x c x hp x wp`` canvas."""
    patches = cols.reshape(n, ho, wo, c, kh, kw)
    # channels-last canvas keeps the innermost axis contiguous during the adds
    out = np.zeros((n, hp, wp, c))
    for a in range(kh):
        for b in range(kw):
            out[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += (
                patches[..., a, b]
            )
    return out.transpose(0, 3, 1, 2)


def conv2d(
    x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlate ``x`` with ``kernels`` of shape ``C_out x C_in x kH x kW``."""
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    if kernels.ndim != 4 or kernels.shape[1] != c:
        raise ShapeMismatch(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    o, _, kh, kw = kernels.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} for {o} output channels")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xpad, kh, kw, stride, ho, wo)
    kmat = kernels.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (gmat.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        dx = None
        if x.requires_grad:
            dpad = _col2im(gmat @ kmat, n, c, h + 2 * pad, w + 2 * pad, kh, kw, stride, ho, wo)
            dx = dpad[:, :, pad : pad + h, pad : pad + w]
            dx = dx[0] if squeeze else dx
        grads = [dx, dk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("conv2d", inputs, out[0] if squeeze else out, bw, stride=stride, pad=pad)


def conv2d_transpose(
    x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernels`` has shape ``C_in x C_out x kH x kW``.

    Output size is ``(H - 1) * stride - 2 * pad + kH``.
    """
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    if kernels.ndim != 4 or kernels.shape[0] != c:
        raise ShapeMismatch(
            f"conv2d_transpose: kernels {kernels.shape} incompatible with input {x.shape}"
        )
    _, o, kh, kw = kernels.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"conv2d_transpose: bias {bias.shape} for {o} output channels")
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho <= 0 or wo <= 0:
        raise NonIntegralOutputSize(f"conv2d_transpose: non-positive output size {ho}x{wo}")

    kmat = kernels.data.reshape(c, -1)
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    canvas = _col2im(xmat @ kmat, n, o, hp, wp, kh, kw, stride, h, w)
    out = canvas[:, :, pad : pad + ho, pad : pad + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g[None] if squeeze else g
        gpad = np.pad(g4, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g4
        gcols = _im2col(gpad, kh, kw, stride, h, w)
        dx = None
        if x.requires_grad:
            dx = (gcols @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            dx = dx[0] if squeeze else dx
        dk = (xmat.T @ gcols).reshape(kernels.shape) if kernels.requires_grad else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record(
        "conv2d_transpose", inputs, out[0] if squeeze else out, bw, stride=stride, pad=pad
    )


__all__ = [
    "Tensor",
    "as_tensor",
    "abs_",
    "add",
    "add_n",
    "concat_channels",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "elementwise",
    "flatten",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "split_channels",
    "sub",
]
