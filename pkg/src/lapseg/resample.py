"""Half-pixel-center resampling helpers shared by the tensor op, the data
loader, and augmentation. One convention, defined once:

    src = (dst + 0.5) * (src_len / dst_len) - 0.5, clamped to [0, src_len-1]
"""

import numpy as np


def halfpixel_coords(src_len, dst_len):
    """Continuous source coordinates for each destination index."""
    scale = src_len / dst_len
    src = (np.arange(dst_len, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(src, 0.0, src_len - 1)


def halfpixel_taps(src_len, dst_len):
    """(i0, i1, w1): linear-interpolation taps per destination index."""
    src = halfpixel_coords(src_len, dst_len)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, src_len - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_matrix(src_len, dst_len, dtype=np.float64):
    """Dense row-stochastic interpolation matrix of shape (dst, src)."""
    i0, i1, w1 = halfpixel_taps(src_len, dst_len)
    m = np.zeros((dst_len, src_len), dtype=np.float64)
    rows = np.arange(dst_len)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m.astype(dtype)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of a (..., H, W) float array via axis gathers."""
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == (out_h, out_w):
        return img.copy()
    i0, i1, wh = halfpixel_taps(h, out_h)
    j0, j1, ww = halfpixel_taps(w, out_w)
    wh = wh.astype(img.dtype)
    ww = ww.astype(img.dtype)
    rows = img[..., i0, :] * (1 - wh)[:, None] + img[..., i1, :] * wh[:, None]
    return rows[..., :, j0] * (1 - ww) + rows[..., :, j1] * ww


def resize_nearest(arr, out_h, out_w):
    """Nearest-neighbour resize of a (..., H, W) array; never invents values."""
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ii = np.rint(halfpixel_coords(h, out_h)).astype(np.int64)
    jj = np.rint(halfpixel_coords(w, out_w)).astype(np.int64)
    return arr[..., ii, :][..., :, jj]
