"""Pure-numpy versions of the convolution and pooling kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` that must return
bitwise-identical arrays; accumulation order is part of the contract.
"""
import numpy as np


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (N, C, H, W) into rows of receptive fields.

    Returns an array of shape (N * Ho * Wo, C * kh * kw); row order is
    (n, oh, ow) and column order is (c, i, j).
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    patches = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an image batch."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def maxpool2d_forward(x, k, stride):
    """Max over k x k windows. Ties resolve to the first (row-major) position.

    Returns ``(out, arg)`` where ``arg`` holds the flat offset ``i * k + j`` of
    the winning element inside each window.
    """
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    windows = np.empty((n, c, ho, wo, k * k), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            windows[..., i * k + j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool2d_backward(grad_out, arg, x_shape, k, stride):
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // k
    cols = (np.arange(wo) * stride)[None, None, None, :] + arg % k
    flat = (np.arange(n * c).reshape(n, c, 1, 1) * (h * w) + rows * w + cols).ravel()
    dx = np.zeros(n * c * h * w, dtype=np.float64)
    np.add.at(dx, flat, grad_out.ravel())
    return dx.reshape(x_shape)
