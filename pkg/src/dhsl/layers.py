"""Stateful layer objects composing one feature-extraction branch.

The default stack follows the recommended configuration: three 3x3
convolutions (32/64/128 channels, stride 1, pad 1), each followed by batch
normalization with a fused ReLU and a 3x3/stride-2 max pool, then a single
1x6 horizontal average pool. On a 128x48x3 input the stack emits a 16x1x128
map (2048 features once flattened).

Each layer caches what its backward pass needs; forward/backward on one
instance must therefore be serialized, while distinct instances are
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, StateError


class ConvLayer:
    """3x3-style convolution with per-output-channel bias."""

    def __init__(self, kh, kw, c_in, c_out, stride=1, pad=1, name="conv",
                 dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.filters = np.zeros((kh, kw, c_in, c_out), dtype=dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.grad_filters = np.zeros_like(self.filters)
        self.grad_bias = np.zeros_like(self.bias)
        self._cached_input = None

    def output_shape(self, h, w):
        kh, kw = self.filters.shape[:2]
        return (
            kernels.out_extent(h, kh, self.stride, self.pad),
            kernels.out_extent(w, kw, self.stride, self.pad),
            self.filters.shape[3],
        )

    def forward(self, x, mode="train"):
        if x.shape[3] != self.filters.shape[2]:
            raise ShapeError(
                f"layer {self.name}: input {x.shape} has {x.shape[3]} channels, "
                f"expected {self.filters.shape[2]}"
            )
        self._cached_input = x
        return kernels.conv2d_forward(x, self.filters, self.bias,
                                      self.stride, self.pad)

    def infer(self, x):
        """Cache-free forward; safe to call concurrently (read-only params)."""
        return kernels.conv2d_forward(x, self.filters, self.bias,
                                      self.stride, self.pad)

    def backward(self, grad_out):
        if self._cached_input is None:
            raise StateError(f"layer {self.name}: backward before forward")
        gx, gw, gb = kernels.conv2d_backward(
            self._cached_input, self.filters, grad_out, self.stride, self.pad
        )
        self.grad_filters += gw
        self.grad_bias += gb
        self._cached_input = None
        return gx

    def parameters(self):
        return [(f"{self.name}.filters", self.filters),
                (f"{self.name}.bias", self.bias)]

    def gradients(self):
        return [(f"{self.name}.filters", self.grad_filters),
                (f"{self.name}.bias", self.grad_bias)]

    def zero_grad(self):
        self.grad_filters[...] = 0
        self.grad_bias[...] = 0


class BatchNormReluLayer:
    """Per-channel batch normalization with learnable affine and fused ReLU.

    Train mode normalizes with current-batch statistics and updates the
    running mean/variance (momentum 0.1); infer mode normalizes with the
    running statistics. ``last_normalized`` exposes the pre-affine activations
    of the most recent forward pass.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, name="bn",
                 dtype=np.float32):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self.last_normalized = None
        self._cache = None

    def forward(self, x, mode="train"):
        if x.shape[3] != self.gamma.shape[0]:
            raise ShapeError(
                f"layer {self.name}: input {x.shape} has {x.shape[3]} channels, "
                f"expected {self.gamma.shape[0]}"
            )
        c = self.gamma.shape[0]
        xr = np.ascontiguousarray(x).reshape(-1, c)
        if mode == "train":
            m = xr.shape[0]
            if m % 2 == 0:
                # Reduce each half separately and combine commutatively, so a
                # two-branch batch sees bit-identical statistics no matter
                # which branch comes first (exact swap symmetry).
                mean = 0.5 * (xr[: m // 2].mean(axis=0)
                              + xr[m // 2 :].mean(axis=0))
                xhat = xr - mean
                var = 0.5 * (
                    np.einsum("nc,nc->c", xhat[: m // 2], xhat[: m // 2])
                    + np.einsum("nc,nc->c", xhat[m // 2 :], xhat[m // 2 :])
                ) / (m // 2)
            else:
                mean = xr.mean(axis=0)
                xhat = xr - mean
                var = np.einsum("nc,nc->c", xhat, xhat) / m
            self.running_mean[...] = ((1 - self.momentum) * self.running_mean
                                      + self.momentum * mean)
            self.running_var[...] = ((1 - self.momentum) * self.running_var
                                     + self.momentum * var)
            istd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat *= istd
        else:
            istd = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (xr - self.running_mean) * istd
        y = xhat * self.gamma
        y += self.beta
        np.maximum(y, 0, out=y)
        self.last_normalized = xhat.reshape(x.shape)
        self._cache = (xhat, istd, y > 0, mode, x.shape)
        return y.reshape(x.shape)

    def infer(self, x):
        """Cache-free forward under the running statistics."""
        istd = 1.0 / np.sqrt(self.running_var + self.eps)
        return np.maximum(self.gamma * ((x - self.running_mean) * istd)
                          + self.beta, 0)

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError(f"layer {self.name}: backward before forward")
        xhat, istd, active, mode, shape = self._cache
        g = np.ascontiguousarray(grad_out).reshape(xhat.shape) * active
        self.grad_gamma += np.einsum("nc,nc->c", g, xhat)
        self.grad_beta += g.sum(axis=0)
        g *= self.gamma  # g is now the gradient w.r.t. the normalized input
        if mode == "train":
            m = xhat.shape[0]
            s1 = g.sum(axis=0)
            s2 = np.einsum("nc,nc->c", g, xhat)
            g -= s1 / m
            g -= xhat * (s2 / m)
        g *= istd
        self._cache = None
        return g.reshape(shape)

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma),
                (f"{self.name}.beta", self.beta)]

    def gradients(self):
        return [(f"{self.name}.gamma", self.grad_gamma),
                (f"{self.name}.beta", self.grad_beta)]

    def state(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def zero_grad(self):
        self.grad_gamma[...] = 0
        self.grad_beta[...] = 0


class MaxPoolLayer:
    def __init__(self, k=3, stride=2, pad=1, name="pool"):
        self.name = name
        self.k = k
        self.stride = stride
        self.pad = pad
        self._switches = None

    def output_shape(self, h, w):
        return (
            kernels.out_extent(h, self.k, self.stride, self.pad),
            kernels.out_extent(w, self.k, self.stride, self.pad),
        )

    def forward(self, x, mode="train"):
        out, self._switches = kernels.maxpool_forward(
            x, self.k, self.k, self.stride, self.pad
        )
        return out

    def infer(self, x):
        return kernels.maxpool_forward(x, self.k, self.k, self.stride,
                                       self.pad)[0]

    def backward(self, grad_out):
        if self._switches is None:
            raise StateError(f"layer {self.name}: backward before forward")
        gx = kernels.maxpool_backward(self._switches, grad_out)
        self._switches = None
        return gx


class AvgPoolLayer:
    def __init__(self, kh=1, kw=6, stride=1, name="avg"):
        self.name = name
        self.kh = kh
        self.kw = kw
        self.stride = stride
        self._input_shape = None

    def output_shape(self, h, w):
        return (
            kernels.out_extent(h, self.kh, self.stride, 0),
            kernels.out_extent(w, self.kw, self.stride, 0),
        )

    def forward(self, x, mode="train"):
        self._input_shape = x.shape
        return kernels.avgpool_forward(x, self.kh, self.kw, self.stride)

    def infer(self, x):
        return kernels.avgpool_forward(x, self.kh, self.kw, self.stride)

    def backward(self, grad_out):
        if self._input_shape is None:
            raise StateError(f"layer {self.name}: backward before forward")
        gx = kernels.avgpool_backward(
            grad_out, self.kh, self.kw, self.stride, self._input_shape
        )
        self._input_shape = None
        return gx


@dataclass(frozen=True)
class StackConfig:
    """Geometry of one feature branch; the default equals the recommended net."""

    input_h: int = 128
    input_w: int = 48
    in_channels: int = 3
    channels: tuple = (32, 64, 128)
    conv_kernel: int = 3
    conv_stride: int = 1
    conv_pad: int = 1
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_pad: int = 1
    avg_kernel: tuple = (1, 6)
    avg_stride: int = 1

    @classmethod
    def default(cls, channel_multiplier=1.0):
        base = (32, 64, 128)
        return cls(channels=tuple(int(round(c * channel_multiplier)) for c in base))


class FeatureStack:
    """The ordered branch C1->B1->M1->C2->B2->M2->C3->B3->M3->A1."""

    def __init__(self, config: StackConfig = None, dtype=np.float32):
        self.config = config or StackConfig()
        cfg = self.config
        self.layers = []
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels, start=1):
            self.layers.append(ConvLayer(
                cfg.conv_kernel, cfg.conv_kernel, c_in, c_out,
                cfg.conv_stride, cfg.conv_pad, name=f"C{i}", dtype=dtype,
            ))
            self.layers.append(BatchNormReluLayer(c_out, name=f"B{i}", dtype=dtype))
            self.layers.append(MaxPoolLayer(
                cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad, name=f"M{i}",
            ))
            c_in = c_out
        self.layers.append(AvgPoolLayer(
            cfg.avg_kernel[0], cfg.avg_kernel[1], cfg.avg_stride, name="A1",
        ))
        self.dtype = dtype

    def layer_output_shapes(self):
        """Shape algebra: (name, (h, w, c)) after each layer, batch excluded."""
        cfg = self.config
        h, w, c = cfg.input_h, cfg.input_w, cfg.in_channels
        rows = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                h, w, c = layer.output_shape(h, w)
            elif isinstance(layer, (MaxPoolLayer, AvgPoolLayer)):
                h, w = layer.output_shape(h, w)
            rows.append((layer.name, (h, w, c)))
        return rows

    @property
    def feature_dim(self):
        h, w, c = self.layer_output_shapes()[-1][1]
        return h * w * c

    def forward(self, x, mode="train"):
        cfg = self.config
        if x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.in_channels):
            raise ShapeError(
                f"stack input {x.shape} != expected "
                f"(n, {cfg.input_h}, {cfg.input_w}, {cfg.in_channels})"
            )
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def infer(self, x):
        """Pure inference pass: no caches touched, concurrency-safe."""
        cfg = self.config
        if x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.in_channels):
            raise ShapeError(
                f"stack input {x.shape} != expected "
                f"(n, {cfg.input_h}, {cfg.input_w}, {cfg.in_channels})"
            )
        for layer in self.layers:
            x = layer.infer(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self):
        out = []
        for layer in self.layers:
            if hasattr(layer, "parameters"):
                out.extend(layer.parameters())
        return out

    def gradients(self):
        out = []
        for layer in self.layers:
            if hasattr(layer, "gradients"):
                out.extend(layer.gradients())
        return out

    def state(self):
        out = []
        for layer in self.layers:
            if hasattr(layer, "state"):
                out.extend(layer.state())
        return out

    def zero_grad(self):
        for layer in self.layers:
            if hasattr(layer, "zero_grad"):
                layer.zero_grad()


def count_params(stack: FeatureStack):
    """Exact per-layer (name, weight count, bias count) plus a total row."""
    rows = []
    total_w = total_b = 0
    for layer in stack.layers:
        if isinstance(layer, ConvLayer):
            w, b = layer.filters.size, layer.bias.size
        elif isinstance(layer, BatchNormReluLayer):
            w, b = layer.gamma.size, layer.beta.size
        else:
            continue
        rows.append((layer.name, w, b))
        total_w += w
        total_b += b
    rows.append(("total", total_w, total_b))
    return rows
