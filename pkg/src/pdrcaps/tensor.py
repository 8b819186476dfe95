"""Dense double-precision layer primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64.  Each primitive comes
as a pair of functions, ``*_forward`` returning ``(output, cache)`` and
``*_backward`` consuming that cache, plus a small layer class that owns its
parameters and records itself on a :class:`GradTape`.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateBatchError, DimensionError, InvalidStateError

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# doubles per im2col chunk (~32 MB); bounds peak memory for wide layers
_COLS_BUDGET = 4_000_000


def output_size(w, f, padding=0, stride=1):
    """Spatial extent after a ``f``-wide window: ``floor((w - f + 2p) / s) + 1``."""
    if stride < 1 or f < 1 or padding < 0:
        raise ContractError(f"invalid window f={f}, stride={stride}, padding={padding}")
    if w + 2 * padding < f:
        raise DimensionError(f"input extent {w} (+2*{padding} padding) is smaller than kernel {f}",
                             axis="spatial")
    return (w - f + 2 * padding) // stride + 1


def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x, dtype=DTYPE)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _check_4d(x, what):
    if x.ndim != 4:
        raise DimensionError(f"{what} expects [N, C, H, W] input, got shape {x.shape}", axis="rank")


def _chunks(n, per_sample):
    step = max(1, _COLS_BUDGET // max(1, per_sample))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


class Parameter:
    """A trainable array with an accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


def kaiming_uniform(rng, shape, fan_in, gain=math.sqrt(2.0)):
    bound = gain * math.sqrt(3.0 / fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------- conv


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` [N, C, H, W] with ``weight`` [K, C, f, f] plus ``bias`` [K]."""
    _check_4d(x, "conv2d")
    k, c, f, f2 = weight.shape
    if f != f2:
        raise DimensionError(f"non-square kernel {weight.shape}", axis="kernel")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d expects {c} input channels, got {x.shape[1]}", axis="channels")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"bias shape {bias.shape} != ({k},)", axis="out_channels")
    n, _, h, w = x.shape
    for name, extent in (("height", h), ("width", w)):
        if extent + 2 * padding < f:
            raise DimensionError(f"{name} {extent} (+2*{padding} padding) smaller than kernel {f}",
                                 axis=name)
    ho = output_size(h, f, padding, stride)
    wo = output_size(w, f, padding, stride)
    xp = _pad(x, padding)
    wmat = weight.reshape(k, -1)
    out = np.empty((n, k, ho, wo))
    for sl in _chunks(n, ho * wo * c * f * f):
        cols = kernels.im2col(xp[sl], f, stride)
        y = cols @ wmat.T
        if bias is not None:
            y += bias
        out[sl] = y.reshape(-1, ho, wo, k).transpose(0, 3, 1, 2)
    cache = (x, weight, bias is not None, stride, padding)
    return out, cache


def conv2d_backward(grad_out, cache):
    """Return ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None for bias-free convs."""
    if cache is None:
        raise InvalidStateError("conv2d_backward called without a forward cache")
    x, weight, has_bias, stride, padding = cache
    k, c, f, _ = weight.shape
    n = x.shape[0]
    ho = output_size(x.shape[2], f, padding, stride)
    wo = output_size(x.shape[3], f, padding, stride)
    if grad_out.shape != (n, k, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {(n, k, ho, wo)}",
                             axis="grad_out")
    xp = _pad(x, padding)
    wmat = weight.reshape(k, -1)
    grad_w = np.zeros_like(wmat)
    grad_xp = np.empty(xp.shape)
    for sl in _chunks(n, ho * wo * c * f * f):
        cols = kernels.im2col(xp[sl], f, stride)
        g = np.ascontiguousarray(grad_out[sl].transpose(0, 2, 3, 1)).reshape(-1, k)
        grad_w += g.T @ cols
        grad_xp[sl] = kernels.col2im(np.ascontiguousarray(g @ wmat), xp[sl].shape, f, stride)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return _unpad(grad_xp, padding), grad_w.reshape(weight.shape), grad_b


def depthwise_conv_forward(x, kernels_, stride=1, padding=0):
    """One ``f x f`` filter per input channel; no bias."""
    _check_4d(x, "depthwise_conv")
    if kernels_.ndim != 3 or kernels_.shape[1] != kernels_.shape[2]:
        raise DimensionError(f"depthwise kernels must be [C, f, f], got {kernels_.shape}", axis="kernel")
    if kernels_.shape[0] != x.shape[1]:
        raise DimensionError(f"{kernels_.shape[0]} depthwise kernels for {x.shape[1]} channels",
                             axis="channels")
    f = kernels_.shape[1]
    for name, extent in (("height", x.shape[2]), ("width", x.shape[3])):
        if extent + 2 * padding < f:
            raise DimensionError(f"{name} {extent} (+2*{padding} padding) smaller than kernel {f}",
                                 axis=name)
    output_size(x.shape[2], f, padding, stride)
    xp = _pad(x, padding)
    out = kernels.depthwise_forward(xp, np.ascontiguousarray(kernels_, dtype=DTYPE), stride)
    return out, (x, kernels_, stride, padding)


def depthwise_conv_backward(grad_out, cache):
    if cache is None:
        raise InvalidStateError("depthwise_conv_backward called without a forward cache")
    x, w, stride, padding = cache
    xp = _pad(x, padding)
    grad_xp, grad_w = kernels.depthwise_backward(
        xp, np.ascontiguousarray(w, dtype=DTYPE), np.ascontiguousarray(grad_out, dtype=DTYPE), stride)
    return _unpad(grad_xp, padding), grad_w


def pointwise_conv_forward(x, weight, bias=None, stride=1, padding=0):
    """1x1 convolution: a per-pixel linear map of the channel vector."""
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ContractError(f"pointwise convolution needs a 1x1 kernel, got {weight.shape}")
    if stride != 1 or padding != 0:
        raise ContractError("pointwise convolution requires stride 1 and no padding")
    _check_4d(x, "pointwise_conv")
    k, c = weight.shape[:2]
    if x.shape[1] != c:
        raise DimensionError(f"pointwise conv expects {c} channels, got {x.shape[1]}", axis="channels")
    out = np.einsum("kc,nchw->nkhw", weight[:, :, 0, 0], x, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out, (x, weight, bias is not None)


def pointwise_conv_backward(grad_out, cache):
    if cache is None:
        raise InvalidStateError("pointwise_conv_backward called without a forward cache")
    x, weight, has_bias = cache
    wm = weight[:, :, 0, 0]
    grad_x = np.einsum("kc,nkhw->nchw", wm, grad_out, optimize=True)
    grad_w = np.einsum("nkhw,nchw->kc", grad_out, x, optimize=True)[:, :, None, None]
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------- batchnorm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization of [N, C, H, W] input.

    In training mode the running statistics are updated in place.
    """
    _check_4d(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batchnorm has {gamma.shape[0]} channels, input has {c}", axis="channels")
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m <= 1:
            raise DegenerateBatchError("batch variance is undefined for N*H*W == 1")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise InvalidStateError("batchnorm_backward called without a forward cache")
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g_xhat = grad_out * gamma[None, :, None, None]
    if not training:
        return g_xhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    mean_g = g_xhat.sum(axis=(0, 2, 3)) / m
    mean_gx = (g_xhat * xhat).sum(axis=(0, 2, 3)) / m
    grad_x = (g_xhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]) \
        * inv_std[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------- elementwise / dense


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out, mask):
    if mask is None:
        raise InvalidStateError("relu_backward called without a forward cache")
    return grad_out * mask


def sigmoid_forward(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(grad_out, out):
    return grad_out * out * (1.0 - out)


def linear_forward(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x`` [N, in], ``weight`` [out, in]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects [N, {weight.shape[1]}] input, got {x.shape}", axis="features")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(grad_out, cache):
    if cache is None:
        raise InvalidStateError("linear_backward called without a forward cache")
    x, weight, has_bias = cache
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_out @ weight, grad_out.T @ x, grad_b


def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis", axis=axis)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, out, axis=-1):
    """Vector-Jacobian product of softmax given its output."""
    return out * (grad_out - (grad_out * out).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------- layers


class GradTape:
    """Ordered record of executed layers and their caches.

    :meth:`backward` replays the record in exact reverse order and clears it.
    """

    def __init__(self):
        self.entries = []

    def record(self, layer, cache):
        self.entries.append((layer, cache))

    def __len__(self):
        return len(self.entries)

    def backward(self, grad):
        while self.entries:
            layer, cache = self.entries.pop()
            grad = layer.backward(grad, cache)
        return grad


class Layer:
    """Base class: parameters are ``Parameter`` attributes listed in ``param_names``."""

    param_names: tuple = ()
    buffer_names: tuple = ()

    def named_parameters(self, prefix=""):
        for name in self.param_names:
            yield prefix + name, getattr(self, name)

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)

    def __call__(self, x, tape=None, training=False):
        out, cache = self.forward(x, training)
        if tape is not None:
            tape.record(self, cache)
        return out

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError


class Conv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        if not bias:
            self.param_names = ("weight",)

    def forward(self, x, training=False):
        return conv2d_forward(x, self.weight.data, None if self.bias is None else self.bias.data,
                              self.stride, self.padding)

    def backward(self, grad, cache):
        gx, gw, gb = conv2d_backward(grad, cache)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class DepthwiseConv2d(Layer):
    param_names = ("weight",)

    def __init__(self, channels, kernel, stride=1, padding=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (channels, kernel, kernel), kernel * kernel))

    def forward(self, x, training=False):
        return depthwise_conv_forward(x, self.weight.data, self.stride, self.padding)

    def backward(self, grad, cache):
        gx, gw = depthwise_conv_backward(grad, cache)
        self.weight.grad += gw
        return gx


class PointwiseConv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, 1, 1), in_channels))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x, training=False):
        return pointwise_conv_forward(x, self.weight.data, self.bias.data)

    def backward(self, grad, cache):
        gx, gw, gb = pointwise_conv_backward(grad, cache)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class BatchNorm2d(Layer):
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x, training=False):
        return batchnorm_forward(x, self.gamma.data, self.beta.data, self.running_mean,
                                 self.running_var, training, self.eps, self.momentum)

    def backward(self, grad, cache):
        gx, gg, gb = batchnorm_backward(grad, cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ReLU(Layer):
    def forward(self, x, training=False):
        return relu_forward(x)

    def backward(self, grad, cache):
        return relu_backward(grad, cache)


class Sigmoid(Layer):
    def forward(self, x, training=False):
        return sigmoid_forward(x)

    def backward(self, grad, cache):
        return sigmoid_backward(grad, cache)


class Linear(Layer):
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features, rng=None, gain=math.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x, training=False):
        return linear_forward(x, self.weight.data, self.bias.data)

    def backward(self, grad, cache):
        gx, gw, gb = linear_backward(grad, cache)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Sequential(Layer):
    """Chain of layers; parameters are named ``<index>.<param>``."""

    def __init__(self, layers=()):
        self.layers = list(layers)

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}{i}.")

    def __call__(self, x, tape=None, training=False):
        for layer in self.layers:
            x = layer(x, tape, training)
        return x

    def __len__(self):
        return len(self.layers)
