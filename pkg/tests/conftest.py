"""Shared test utilities: finite-difference gradient checking and oracles."""

import numpy as np
import pytest


def numerical_gradient(f, x, eps=1e-4):
    """Central finite differences of a scalar function w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-3):
    """Element-wise |a - n| / max(|a|, |n|, floor), maximized.

    The floor turns the comparison into an absolute check for near-zero
    gradients, where finite differences carry ~1e-8 noise of their own.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_conv2d(x, w, b, stride, pad):
    """Quadruple-loop convolution oracle, independent of the kernel code."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = (h - kh + 2 * pad) // stride + 1
    ow = (wd - kw + 2 * pad) // stride + 1
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for ni in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for co in range(cout):
                    acc = float(b[co])
                    for dy in range(kh):
                        for dx in range(kw):
                            iy = oy * stride + dy - pad
                            ix = ox * stride + dx - pad
                            if 0 <= iy < h and 0 <= ix < wd:
                                for ci in range(cin):
                                    acc += x[ni, iy, ix, ci] * w[dy, dx, ci, co]
                    out[ni, oy, ox, co] = acc
    return out


def brute_force_maxpool(x, kh, kw, stride, pad):
    """Window-max oracle with -inf padding."""
    n, h, w, c = x.shape
    oh = (h - kh + 2 * pad) // stride + 1
    ow = (w - kw + 2 * pad) // stride + 1
    out = np.full((n, oh, ow, c), -np.inf, dtype=np.float64)
    for ni in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for ci in range(c):
                    for dy in range(kh):
                        for dx in range(kw):
                            iy = oy * stride + dy - pad
                            ix = ox * stride + dx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                out[ni, oy, ox, ci] = max(
                                    out[ni, oy, ox, ci], x[ni, iy, ix, ci]
                                )
    return out


def brute_force_avgpool(x, kh, kw, stride):
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, oh, ow, c), dtype=np.float64)
    for ni in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for ci in range(c):
                    acc = 0.0
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += x[ni, oy * stride + dy, ox * stride + dx, ci]
                    out[ni, oy, ox, ci] = acc / (kh * kw)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
