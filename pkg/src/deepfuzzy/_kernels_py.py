"""Pure numpy implementations of the gather/scatter kernels.

Used when the compiled ``_kernels`` extension is unavailable. Results are
bitwise identical to the compiled versions (same accumulation order).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    """Gather sliding windows of ``x`` (N, C, H, W) into a matrix.

    Returns an array of shape (N*OH*OW, C*kh*kw), rows ordered (n, oy, ox)
    and columns ordered (c, ky, kx).
    """
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    cols = np.ascontiguousarray(win[:, :, :oh, :ow].transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(cols, shape, kh, kw, stride):
    """Scatter-add the rows of ``cols`` back onto an (N, C, H, W) array."""
    n, c, h, w = shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=np.float64)
    # descending offsets: per output pixel this adds in window-row-major order
    for ky in reversed(range(kh)):
        ys = slice(ky, ky + stride * (oh - 1) + 1, stride)
        for kx in reversed(range(kw)):
            xs = slice(kx, kx + stride * (ow - 1) + 1, stride)
            out[:, :, ys, xs] += blocks[:, :, ky, kx]
    return out
