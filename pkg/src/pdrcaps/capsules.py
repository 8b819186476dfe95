"""Capsule primitives: squash, CFC capsule creation, routing-by-agreement, losses, decoder.

Capsule sets are arrays shaped ``[N, n_caps, d]``.  Routing is unrolled, so
gradients flow through every iteration including the logit updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, InvalidStateError
from .tensor import (Conv2d, GradTape, Layer, Linear, Parameter, ReLU, Sequential, Sigmoid,
                     kaiming_uniform, output_size, softmax_backward)

DEFAULT_ROUTING_ITERATIONS = 3


def seqsum(x, axis, keepdims=False):
    """Left-to-right sum along ``axis``.

    numpy's reductions switch to pairwise / BLAS order depending on size;
    the capsule path uses this fixed order so results are reproducible by
    a plain scalar loop.
    """
    out = np.take(np.cumsum(x, axis=axis), [-1] if keepdims else -1, axis=axis)
    return out


# --------------------------------------------------------------------------- squash


def squash_forward(s, axis=-1):
    """Scale each vector to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction.

    Written as ``s * |s| / (1 + |s|^2)``, which is exact at ``|s| = 1`` and
    returns the zero vector for ``s = 0``.
    """
    norm = np.sqrt(seqsum(s * s, axis, keepdims=True))
    scale = norm / (1.0 + norm * norm)
    return s * scale, (s, norm, scale, axis)


def squash_backward(grad_out, cache):
    if cache is None:
        raise InvalidStateError("squash_backward called without a forward cache")
    s, norm, scale, axis = cache
    n2 = norm * norm
    # d(scale)/d|s| divided by |s|; the s s^T term vanishes at s = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        dscale = np.where(norm > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * norm), 0.0)
    proj = (s * grad_out).sum(axis=axis, keepdims=True)
    return scale * grad_out + dscale * proj * s


def squash(s, axis=-1):
    return squash_forward(s, axis)[0]


def capsule_lengths(caps):
    return np.sqrt((caps * caps).sum(axis=-1))


# --------------------------------------------------------------------------- CFC


class CFCLayer(Layer):
    """Convolutional fully-connected capsule layer.

    Every ``kernel x kernel`` window over all channels is mapped by one shared
    affine transform to ``caps_types`` capsules of dimension ``caps_dim``,
    which are then squashed.  Output: ``[N, caps_types * H' * W', caps_dim]``
    ordered type-major, then row, then column.
    """

    def __init__(self, in_channels, kernel=1, caps_dim=8, caps_types=1, stride=1, rng=None):
        self.in_channels, self.kernel = in_channels, kernel
        self.caps_dim, self.caps_types, self.stride = caps_dim, caps_types, stride
        self.conv = Conv2d(in_channels, caps_dim * caps_types, kernel, stride=stride, rng=rng)

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix)

    def n_capsules(self, h, w):
        return self.caps_types * output_size(h, self.kernel, 0, self.stride) \
            * output_size(w, self.kernel, 0, self.stride)

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise DimensionError(f"CFC expects [N, C, H, W], got {x.shape}", axis="rank")
        n, _, h, w = x.shape
        for name, extent in (("height", h), ("width", w)):
            if self.kernel > extent:
                raise DimensionError(f"CFC kernel {self.kernel} exceeds feature-map {name} {extent}",
                                     axis=name)
        y, conv_cache = self.conv.forward(x)
        ho, wo = y.shape[2], y.shape[3]
        t, d = self.caps_types, self.caps_dim
        s = y.reshape(n, t, d, ho, wo).transpose(0, 1, 3, 4, 2).reshape(n, t * ho * wo, d)
        v, sq_cache = squash_forward(s)
        return v, (conv_cache, sq_cache, (n, t, d, ho, wo))

    def backward(self, grad, cache):
        conv_cache, sq_cache, (n, t, d, ho, wo) = cache
        gs = squash_backward(grad, sq_cache)
        gy = gs.reshape(n, t, ho, wo, d).transpose(0, 1, 4, 2, 3).reshape(n, t * d, ho, wo)
        return self.conv.backward(np.ascontiguousarray(gy), conv_cache)


def cfc_layer(features, kernel, caps_dim, weight, bias, caps_types=1, stride=1):
    """Functional CFC: ``weight`` [caps_types*caps_dim, C, k, k], ``bias`` [caps_types*caps_dim]."""
    layer = CFCLayer(features.shape[1], kernel, caps_dim, caps_types, stride)
    layer.conv.weight.data = np.asarray(weight, dtype=float)
    layer.conv.bias.data = np.asarray(bias, dtype=float)
    return layer.forward(features)[0]


# --------------------------------------------------------------------------- prediction + routing


def predict(u, weights):
    """Prediction vectors ``u_hat[n, i, j] = W[i, j] @ u[n, i]``.

    ``u`` is [N, n_in, d_in] and ``weights`` [n_in, n_out, d_out, d_in].
    """
    if u.ndim != 3:
        raise DimensionError(f"capsules must be [N, n_caps, d], got {u.shape}", axis="rank")
    if weights.ndim != 4:
        raise DimensionError(f"transform weights must be 4-D, got {weights.shape}", axis="rank")
    if u.shape[1] != weights.shape[0]:
        raise DimensionError(f"{u.shape[1]} input capsules for weights expecting {weights.shape[0]}",
                             axis="n_in")
    if u.shape[2] != weights.shape[3]:
        raise DimensionError(f"capsule dim {u.shape[2]} != transform input dim {weights.shape[3]}",
                             axis="d_in")
    return np.einsum("ijdk,nik->nijd", weights, u, optimize=True)


def predict_backward(grad_uhat, u, weights):
    """Return ``(grad_u, grad_weights)``."""
    grad_u = np.einsum("ijdk,nijd->nik", weights, grad_uhat, optimize=True)
    grad_w = np.einsum("nijd,nik->ijdk", grad_uhat, u, optimize=True)
    return grad_u, grad_w


@dataclass
class RoutingState:
    """Routing logits and coupling coefficients after the last iteration.

    ``logits`` and ``coeffs`` are [N, n_in, n_out]; ``coeff_history`` keeps
    the coefficients used at every iteration.
    """

    logits: np.ndarray
    coeffs: np.ndarray
    iteration: int
    coeff_history: list = field(default_factory=list)


def dynamic_routing_forward(uhat, iterations=DEFAULT_ROUTING_ITERATIONS):
    """Routing-by-agreement over predictions ``uhat`` [N, n_in, n_out, d_out].

    Returns ``(v, state, cache)`` with ``v`` [N, n_out, d_out].
    """
    if iterations < 1:
        raise ContractError(f"routing needs at least one iteration, got {iterations}")
    if uhat.ndim != 4:
        raise DimensionError(f"predictions must be [N, n_in, n_out, d], got {uhat.shape}", axis="rank")
    b = np.zeros(uhat.shape[:3])
    steps = []
    for it in range(iterations):
        e = np.exp(b - b.max(axis=2, keepdims=True))
        c = e / seqsum(e, 2, keepdims=True)
        s = seqsum(c[..., None] * uhat, 1)
        v, sq_cache = squash_forward(s)
        steps.append((c, sq_cache, v))
        if it < iterations - 1:
            b = b + seqsum(uhat * v[:, None, :, :], 3)
    state = RoutingState(logits=b, coeffs=steps[-1][0], iteration=iterations,
                         coeff_history=[st[0] for st in steps])
    return v, state, (uhat, steps)


def dynamic_routing_backward(grad_v, cache):
    """Backpropagate through the unrolled iterations; returns ``grad_uhat``."""
    if cache is None:
        raise InvalidStateError("dynamic_routing_backward called without a forward cache")
    uhat, steps = cache
    grad_uhat = np.zeros_like(uhat)
    grad_b_next = None
    for t in range(len(steps) - 1, -1, -1):
        c, sq_cache, v = steps[t]
        gv = grad_v if t == len(steps) - 1 else np.zeros_like(v)
        if grad_b_next is not None:
            # b_{t+1} = b_t + <uhat, v_t>
            gv = gv + np.einsum("nij,nijd->njd", grad_b_next, uhat, optimize=True)
            grad_uhat += grad_b_next[..., None] * v[:, None, :, :]
        gs = squash_backward(gv, sq_cache)
        grad_c = np.einsum("njd,nijd->nij", gs, uhat, optimize=True)
        grad_uhat += c[..., None] * gs[:, None, :, :]
        grad_b = softmax_backward(grad_c, c, axis=2)
        grad_b_next = grad_b if grad_b_next is None else grad_b + grad_b_next
    return grad_uhat


def dynamic_routing(uhat, iterations=DEFAULT_ROUTING_ITERATIONS):
    v, state, _ = dynamic_routing_forward(uhat, iterations)
    return v, state


class CapsuleRouting(Layer):
    """Prediction transform followed by dynamic routing to ``n_out`` class capsules."""

    param_names = ("weight",)

    def __init__(self, n_in, n_out, d_in, d_out, iterations=DEFAULT_ROUTING_ITERATIONS, rng=None):
        if iterations < 1:
            raise ContractError(f"routing needs at least one iteration, got {iterations}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.d_in, self.d_out = n_in, n_out, d_in, d_out
        self.iterations = iterations
        self.weight = Parameter(kaiming_uniform(rng, (n_in, n_out, d_out, d_in), d_in, gain=1.0))
        self.last_state = None

    def forward(self, u, training=False):
        uhat = predict(u, self.weight.data)
        v, state, rcache = dynamic_routing_forward(uhat, self.iterations)
        self.last_state = state
        return v, (u, rcache)

    def backward(self, grad, cache):
        u, rcache = cache
        guhat = dynamic_routing_backward(grad, rcache)
        gu, gw = predict_backward(guhat, u, self.weight.data)
        self.weight.grad += gw
        return gu


# --------------------------------------------------------------------------- losses


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    reconstruction_weight: float = 0.0005

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus <= 1.0:
            raise ContractError(f"margin bounds need 0 < m_minus < m_plus <= 1, got "
                                f"{self.m_minus}, {self.m_plus}")
        if self.lambda_down <= 0:
            raise ContractError("lambda_down must be positive")
        if self.reconstruction_weight < 0:
            raise ContractError("reconstruction_weight must be non-negative")


HARD_TRAINING_ROUNDS = (
    MarginLossConfig(0.9, 0.1, 0.5),
    MarginLossConfig(0.95, 0.05, 0.5),
)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be a 1-D integer array", axis="labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label out of range [0, {n_classes})")
    return labels.astype(np.int64)


def margin_loss(class_caps, labels, cfg=MarginLossConfig()):
    """Batch-mean margin loss and its gradient w.r.t. ``class_caps`` [N, k, d]."""
    n, k, _ = class_caps.shape
    labels = _check_labels(labels, k)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} samples", axis="batch")
    lengths = capsule_lengths(class_caps)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    up = np.maximum(0.0, cfg.m_plus - lengths)
    down = np.maximum(0.0, lengths - cfg.m_minus)
    per_sample = (onehot * up ** 2 + cfg.lambda_down * (1.0 - onehot) * down ** 2).sum(axis=1)
    g_len = (-2.0 * onehot * up + 2.0 * cfg.lambda_down * (1.0 - onehot) * down) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(lengths[..., None] > 0, class_caps / lengths[..., None], 0.0)
    return float(per_sample.mean()), g_len[..., None] * unit


def reconstruction_loss(images, recon, weight):
    """``weight * sum((x - x_hat)^2)`` per sample, averaged over the batch; returns (loss, grad)."""
    n = images.shape[0]
    diff = recon - images.reshape(n, -1)
    loss = weight * float((diff * diff).sum()) / n
    return loss, (2.0 * weight / n) * diff


# --------------------------------------------------------------------------- decoder


def mask_capsules(class_caps, labels=None):
    """Zero every capsule except the labelled one (or the longest when ``labels`` is None)."""
    n, k, _ = class_caps.shape
    if labels is None:
        labels = capsule_lengths(class_caps).argmax(axis=1)
    labels = _check_labels(labels, k)
    mask = np.zeros((n, k, 1))
    mask[np.arange(n), labels] = 1.0
    return class_caps * mask, mask


class Decoder(Layer):
    """Fully-connected reconstruction network from masked class capsules to pixels in [0, 1]."""

    def __init__(self, n_classes, caps_dim, out_pixels, hidden=(512, 1024), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes, self.caps_dim, self.out_pixels = n_classes, caps_dim, out_pixels
        self.hidden = tuple(hidden)
        layers = []
        width = n_classes * caps_dim
        for h in self.hidden:
            layers += [Linear(width, h, rng=rng), ReLU()]
            width = h
        layers += [Linear(width, out_pixels, rng=rng, gain=1.0), Sigmoid()]
        self.net = Sequential(layers)

    def named_parameters(self, prefix=""):
        yield from self.net.named_parameters(prefix)

    def forward(self, class_caps, labels=None):
        masked, mask = mask_capsules(class_caps, labels)
        n = class_caps.shape[0]
        tape = GradTape()
        out = self.net(masked.reshape(n, -1), tape)
        return out, (tape, mask, class_caps.shape)

    def backward(self, grad, cache):
        tape, mask, shape = cache
        g = tape.backward(grad)
        return g.reshape(shape) * mask


def decoder_forward(decoder, class_caps, labels=None):
    return decoder.forward(class_caps, labels)[0]


__all__ = [
    "squash", "squash_forward", "squash_backward", "capsule_lengths", "CFCLayer", "cfc_layer",
    "predict", "predict_backward", "RoutingState", "dynamic_routing", "dynamic_routing_forward",
    "dynamic_routing_backward", "CapsuleRouting", "MarginLossConfig", "HARD_TRAINING_ROUNDS",
    "margin_loss", "reconstruction_loss", "mask_capsules", "Decoder", "decoder_forward",
    "DEFAULT_ROUTING_ITERATIONS",
]
