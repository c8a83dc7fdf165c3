"""Numpy implementations of the convolution and pooling kernels.

These are the reference path and the fallback when the compiled module is not
available. Accumulation order matches ``_ckernels.pyx`` exactly, so both paths
give bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    """Unfold ``x`` (N, C, H, W) into rows of shape (N*OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`. Overlapping windows are summed with (i, j)
    descending, matching a row-by-row scatter of ``cols``."""
    n, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    blocks = cols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def maxpool_forward(x, k, stride):
    """Return pooled output and flat argmax offsets into each (H, W) plane."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, oh, ow, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ii, jj = np.divmod(local, k)
    rows = np.arange(oh)[:, None] * stride + ii
    cols = np.arange(ow)[None, :] * stride + jj
    arg = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), arg


def maxpool_backward(gout, arg, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w), dtype=gout.dtype)
    flat_arg = arg.reshape(n * c, -1)
    plane = np.arange(n * c)[:, None]
    np.add.at(dx, (np.broadcast_to(plane, flat_arg.shape), flat_arg), gout.reshape(n * c, -1))
    return dx.reshape(x_shape)
