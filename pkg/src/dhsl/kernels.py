"""Dense rank-4 tensor kernels: convolution, pooling, element-wise maps.

Activations and gradients are plain ``numpy.ndarray`` objects of shape
``(n, h, w, c)`` — batch, rows, cols, channels — stored C-contiguous, so a
flattened view iterates with channels fastest. That iteration order is part
of the on-disk checkpoint format and of the flattened feature layout, so it
must never change.

All kernels are pure functions: no global state, no RNG, bit-identical
outputs for identical inputs. Gradients are written by hand per kernel; there
is no autodiff graph. Convolution is evaluated as one GEMM per kernel tap
accumulated over the window, which avoids materializing an im2col buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:  # BLAS gemm with beta-accumulation saves a temporary per kernel tap
    from scipy.linalg.blas import dgemm as _dgemm
    from scipy.linalg.blas import sgemm as _sgemm
except ImportError:  # pragma: no cover - scipy is a hard dependency in practice
    _sgemm = _dgemm = None

from .errors import ShapeError


def _gemm_acc(out, a, b):
    """out += a @ b, accumulating in place via BLAS when dtypes allow."""
    gemm = {np.dtype(np.float32): _sgemm, np.dtype(np.float64): _dgemm}.get(
        out.dtype
    )
    if (gemm is not None and a.dtype == out.dtype and b.dtype == out.dtype
            and out.flags.c_contiguous and a.flags.c_contiguous
            and b.flags.c_contiguous):
        # C-order out/a/b seen through .T are Fortran-order: out.T = b.T @ a.T
        gemm(1.0, b.T, a.T, beta=1.0, c=out.T, overwrite_c=True)
    else:
        out += a @ b


def check_tensor4(x, name="tensor"):
    """Validate an (n, h, w, c) activation array and return it.

    Raises ShapeError unless ``x`` is a rank-4 array with every dimension >= 1.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n,h,w,c), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: shape {x.shape}")
    return x


def out_extent(size, k, stride, pad):
    """Output extent of a sliding window: floor((size - k + 2*pad)/stride) + 1."""
    ext = (size - k + 2 * pad) // stride + 1
    if ext < 1:
        raise ShapeError(
            f"window {k} with stride {stride}, pad {pad} does not fit extent {size}"
        )
    return ext


def _window_view(xp, dy, dx, oh, ow, stride):
    """Strided view of the padded input at one kernel tap (dy, dx)."""
    return xp[:, dy : dy + oh * stride : stride, dx : dx + ow * stride : stride, :]


def _check_conv_args(x, filters, stride, pad):
    x = check_tensor4(x, "conv input")
    filters = np.asarray(filters)
    if filters.ndim != 4:
        raise ShapeError(f"filters must be (kh,kw,c_in,c_out), got {filters.shape}")
    if filters.shape[2] != x.shape[3]:
        raise ShapeError(
            f"filter input channels {filters.shape} do not match input {x.shape}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    return x, filters


def conv2d_forward(x, filters, bias, stride=1, pad=0):
    """2-D cross-correlation with zero padding.

    x: (n, h, w, c_in); filters: (kh, kw, c_in, c_out); bias: (c_out,).
    Output: (n, oh, ow, c_out) with oh/ow per ``out_extent``.
    """
    x, filters = _check_conv_args(x, filters, stride, pad)
    kh, kw, c_in, c_out = filters.shape
    bias = np.asarray(bias)
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    n, h, w, _ = x.shape
    oh = out_extent(h, kh, stride, pad)
    ow = out_extent(w, kw, stride, pad)

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.empty((n * oh * ow, c_out), dtype=np.result_type(x, filters))
    out[:] = bias
    for dy in range(kh):
        for dx in range(kw):
            tap = np.ascontiguousarray(_window_view(xp, dy, dx, oh, ow, stride))
            _gemm_acc(out, tap.reshape(-1, c_in), filters[dy, dx])
    return out.reshape(n, oh, ow, c_out)


def conv2d_backward(x, filters, grad_out, stride=1, pad=0):
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_input, grad_filters, grad_bias). grad_out must have the
    forward output's shape.
    """
    x, filters = _check_conv_args(x, filters, stride, pad)
    grad_out = np.asarray(grad_out)
    kh, kw, c_in, c_out = filters.shape
    n, h, w, _ = x.shape
    oh = out_extent(h, kh, stride, pad)
    ow = out_extent(w, kw, stride, pad)
    if grad_out.shape != (n, oh, ow, c_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, oh, ow, c_out)}"
        )

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    g2d = np.ascontiguousarray(grad_out).reshape(-1, c_out)
    grad_bias = g2d.sum(axis=0)
    grad_filters = np.empty_like(filters)
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c_in), dtype=grad_out.dtype)
    for dy in range(kh):
        for dx in range(kw):
            tap = np.ascontiguousarray(_window_view(xp, dy, dx, oh, ow, stride))
            grad_filters[dy, dx] = tap.reshape(-1, c_in).T @ g2d
            _window_view(gxp, dy, dx, oh, ow, stride)[...] += (
                g2d @ filters[dy, dx].T
            ).reshape(n, oh, ow, c_in)
    if pad:
        gxp = gxp[:, pad : pad + h, pad : pad + w, :]
    return gxp, grad_filters, grad_bias


@dataclass(frozen=True)
class PoolSwitches:
    """Winning-coordinate record from a max-pool forward pass.

    ``win`` holds, per output cell, the window-relative scan position
    dy*kw + dx of the winning input element; together with the geometry
    fields it names the absolute winning coordinate for the backward pass.
    """

    win: np.ndarray
    input_shape: tuple
    kh: int
    kw: int
    stride: int
    pad: int

    def winner_offsets(self):
        """Per-cell (dy, dx) window offsets of the winning elements."""
        return self.win // self.kw, self.win % self.kw


def maxpool_forward(x, kh, kw, stride, pad):
    """Max pooling; padded cells participate as -inf so they never win.

    Returns (output, PoolSwitches). Ties go to the first window element in
    row-major (dy, dx) scan order.
    """
    x = check_tensor4(x, "pool input")
    if kh < 1 or kw < 1:
        raise ShapeError(f"invalid pool window {kh}x{kw}")
    if pad >= kh or pad >= kw:
        raise ShapeError(f"pad {pad} must be smaller than the {kh}x{kw} window")
    n, h, w, c = x.shape
    oh = out_extent(h, kh, stride, pad)
    ow = out_extent(w, kw, stride, pad)

    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x
    if kh * kw > 255:
        raise ShapeError(f"pool window {kh}x{kw} too large for the winner map")
    best = _window_view(xp, 0, 0, oh, ow, stride).copy()
    win = np.zeros(best.shape, dtype=np.uint8)
    better = np.empty(best.shape, dtype=bool)
    for dy in range(kh):
        for dx in range(kw):
            if dy == 0 and dx == 0:
                continue
            tap = _window_view(xp, dy, dx, oh, ow, stride)
            np.greater(tap, best, out=better)  # strict: first scan spot keeps ties
            np.copyto(best, tap, where=better)
            np.copyto(win, np.uint8(dy * kw + dx), where=better)
    return best, PoolSwitches(win, x.shape, kh, kw, stride, pad)


def maxpool_backward(switches, grad_out):
    """Route each grad_out element to its recorded argmax coordinate."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != switches.win.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != switch map {switches.win.shape}"
        )
    n, h, w, c = switches.input_shape
    pad, stride = switches.pad, switches.stride
    oh, ow = grad_out.shape[1:3]
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=grad_out.dtype)
    routed = np.empty(grad_out.shape, dtype=grad_out.dtype)
    mask = np.empty(grad_out.shape, dtype=bool)
    for dy in range(switches.kh):
        for dx in range(switches.kw):
            np.equal(switches.win, np.uint8(dy * switches.kw + dx), out=mask)
            np.multiply(grad_out, mask, out=routed)
            _window_view(gxp, dy, dx, oh, ow, stride)[...] += routed
    if pad:
        gxp = gxp[:, pad : pad + h, pad : pad + w, :]
    return gxp


def avgpool_forward(x, kh, kw, stride=1):
    """Average pooling without padding; the window must fit entirely."""
    x = check_tensor4(x, "pool input")
    n, h, w, c = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"window {kh}x{kw} does not fit input {x.shape}")
    oh = out_extent(h, kh, stride, 0)
    ow = out_extent(w, kw, stride, 0)
    acc = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            acc += _window_view(x, dy, dx, oh, ow, stride)
    return acc / (kh * kw)


def avgpool_backward(grad_out, kh, kw, stride, input_shape):
    """Spread grad_out/(kh*kw) back over each window."""
    grad_out = np.asarray(grad_out)
    n, h, w, c = input_shape
    oh = out_extent(h, kh, stride, 0)
    ow = out_extent(w, kw, stride, 0)
    if grad_out.shape != (n, oh, ow, c):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, oh, ow, c)}"
        )
    share = grad_out / (kh * kw)
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    for dy in range(kh):
        for dx in range(kw):
            _window_view(gx, dy, dx, oh, ow, stride)[...] += share
    return gx


_UNARY = {
    "abs": np.abs,
    "relu": lambda a: np.maximum(a, 0),
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op, a, b=None):
    """Element-wise map over equal-shaped arrays.

    op: one of add/sub/mul (binary), abs/relu (unary), scale (array * scalar).
    """
    a = np.asarray(a)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "scale":
        if b is None or np.ndim(b) != 0:
            raise ShapeError("scale requires a scalar second argument")
        return a * b
    if op in _BINARY:
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op: {op!r}")
