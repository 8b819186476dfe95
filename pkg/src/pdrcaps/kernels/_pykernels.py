"""Pure numpy implementations of the windowed kernels.

Every function here works on an already padded input.  The compiled twin in
``_ckernels.pyx`` has the same signatures and accumulates in the same order,
so both backends agree bit for bit except for ``depthwise_backward``'s
kernel gradient (numpy uses pairwise summation there).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, f, stride):
    # [N, C, Ho, Wo, f, f] view, no copy
    w = sliding_window_view(x, (f, f), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def im2col(x, f, stride):
    """Unfold ``x`` [N, C, H, W] into rows of shape [N*Ho*Wo, C*f*f]."""
    n, c = x.shape[:2]
    w = _windows(x, f, stride)
    ho, wo = w.shape[2], w.shape[3]
    cols = np.ascontiguousarray(w.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * f * f)


def col2im(cols, shape, f, stride):
    """Adjoint of :func:`im2col`: scatter-add rows back into an [N, C, H, W] grid."""
    n, c, h, w = shape
    ho = (h - f) // stride + 1
    wo = (w - f) // stride + 1
    blocks = cols.reshape(n, ho, wo, c, f, f)
    out = np.zeros(shape)
    for ki in range(f):
        for kj in range(f):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += blocks[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out


def depthwise_forward(x, w, stride):
    """Per-channel cross-correlation of ``x`` [N, C, H, W] with ``w`` [C, f, f]."""
    n, c, h, wd = x.shape
    f = w.shape[1]
    ho = (h - f) // stride + 1
    wo = (wd - f) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ki in range(f):
        for kj in range(f):
            patch = x[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                      kj:kj + stride * (wo - 1) + 1:stride]
            out += w[None, :, ki, kj, None, None] * patch
    return out


def depthwise_backward(x, w, grad_out, stride):
    """Return ``(grad_x, grad_w)`` for :func:`depthwise_forward`."""
    f = w.shape[1]
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(x.shape)
    grad_w = np.zeros(w.shape)
    for ki in range(f):
        for kj in range(f):
            rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
            cols = slice(kj, kj + stride * (wo - 1) + 1, stride)
            grad_x[:, :, rows, cols] += w[None, :, ki, kj, None, None] * grad_out
            grad_w[:, ki, kj] = np.einsum("nchw,nchw->c", x[:, :, rows, cols], grad_out)
    return grad_x, grad_w
