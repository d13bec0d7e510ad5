"""Pure-numpy convolution and pooling kernels.

Column layout shared with the compiled kernels: ``cols[n, (c, i, j), (y, x)]``
holds ``xp[n, c, y*sh + i, x*sw + j]`` for a padded input ``xp``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw, oh, ow):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, c, hp, wp, kh, kw, sh, sw, oh, ow):
    n = cols.shape[0]
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += cols6[:, :, i, j]
    return out


def maxpool_forward(xp, k, s, oh, ow):
    """Return the pooled map and the flat in-window index of each maximum."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(flat, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(g, arg, hp, wp, k, s):
    n, c, oh, ow = g.shape
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            sel = np.where(arg == i * k + j, g, 0)
            out[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += sel
    return out
