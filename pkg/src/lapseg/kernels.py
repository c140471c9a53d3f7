"""Hot numeric kernels: 2D convolution and paired image/mask rotation.

Each kernel exists in two interchangeable implementations:

* ``numba`` (default whenever numba imports): direct explicit-loop jitted
  kernels for the dominant 3x3 stride-1 convolutions, per-image column
  buffers plus BLAS ``np.dot`` for other geometries.
* ``numpy``: a vectorized im2col built on ``sliding_window_view``.

Select with the environment variable ``LAPSEG_KERNELS=numba|numpy`` or at
runtime with :func:`set_backend`. Both backends agree to float rounding;
each is bitwise deterministic for a fixed backend and thread count.
``bench/bench_kernels.py`` compares them.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


# Selftest sabotage hook: when nonzero, the input gradient is nudged so the
# gradient checker must report a failure (see cli selftest).
CONV_INPUT_GRAD_NUDGE = 0.0

_BACKEND = None


def available_backends():
    return ("numba", "numpy") if HAS_NUMBA else ("numpy",)


def set_backend(name):
    """Force the kernel backend; raises ConfigError for unknown names."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ConfigError(f"unknown kernel backend {name!r}; choose numba or numpy")
    if name == "numba" and not HAS_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    _BACKEND = name


def backend():
    return _BACKEND


def _init_backend():
    env = os.environ.get("LAPSEG_KERNELS", "").strip().lower()
    if env:
        set_backend(env)
    else:
        set_backend("numba" if HAS_NUMBA else "numpy")


def conv_out_extent(extent, k, stride, padding):
    return (extent + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy backend


def _conv2d_forward_np(xp, w, stride, Ho, Wo):
    B, Cin, _, _ = xp.shape
    Cout, _, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * kh * kw)
    out = cols @ w.reshape(Cout, -1).T
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))


def _conv2d_input_grad_np(gout, w, xp_shape, stride):
    B, Cin, Hp, Wp = xp_shape
    Cout, _, kh, kw = w.shape
    _, _, Ho, Wo = gout.shape
    g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
    gcols = (g2 @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, Cin, kh, kw)
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return gxp


def _conv2d_weight_grad_np(gout, xp, w_shape, stride):
    Cout, Cin, kh, kw = w_shape
    B, _, _, _ = xp.shape
    _, _, Ho, Wo = gout.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * kh * kw)
    g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
    return (g2.T @ cols).reshape(w_shape)


# ---------------------------------------------------------------------------
# numba backend
#
# The 3x3 stride-1 convolutions that dominate the architecture get direct
# explicit-loop kernels (unit-stride inner loops vectorize well); other
# kernel geometries fall back to per-image column buffers plus BLAS dot.


@njit(cache=True, fastmath=True)
def _conv3x3_fwd_nb(xp, w, out):
    B, Cin, Hp, Wp = xp.shape
    Cout = w.shape[0]
    H, W = out.shape[2], out.shape[3]
    for b in range(B):
        for co in range(Cout):
            acc = np.zeros((H, W), dtype=out.dtype)
            for ci in range(Cin):
                xc = xp[b, ci]
                for i in range(3):
                    w0 = w[co, ci, i, 0]
                    w1 = w[co, ci, i, 1]
                    w2 = w[co, ci, i, 2]
                    for h in range(H):
                        ar = acc[h]
                        xr = xc[h + i]
                        for t in range(W):
                            ar[t] += w0 * xr[t] + w1 * xr[t + 1] + w2 * xr[t + 2]
            out[b, co] = acc
    return out


@njit(cache=True, fastmath=True)
def _conv3x3_igrad_nb(g, w, gxp):
    # gather form: pad the output gradient by 2 so every read is in
    # bounds, then each padded-input cell sums 9 shifted products
    B, Cout, H, W = g.shape
    Cin = gxp.shape[1]
    Hp, Wp = gxp.shape[2], gxp.shape[3]
    gp = np.zeros((B, Cout, H + 4, W + 4), dtype=g.dtype)
    for b in range(B):
        for co in range(Cout):
            for h in range(H):
                gr = g[b, co, h]
                pr = gp[b, co, h + 2]
                for t in range(W):
                    pr[t + 2] = gr[t]
    for b in range(B):
        for ci in range(Cin):
            acc = np.zeros((Hp, Wp), dtype=gxp.dtype)
            for co in range(Cout):
                gc = gp[b, co]
                for i in range(3):
                    w0 = w[co, ci, i, 0]
                    w1 = w[co, ci, i, 1]
                    w2 = w[co, ci, i, 2]
                    for hp in range(Hp):
                        gr = gc[hp + 2 - i]
                        ar = acc[hp]
                        for t in range(Wp):
                            ar[t] += w0 * gr[t + 2] + w1 * gr[t + 1] + w2 * gr[t]
            gxp[b, ci] = acc
    return gxp


@njit(cache=True, fastmath=True)
def _conv3x3_wgrad_nb(g, xp, gw):
    B, Cout, H, W = g.shape
    Cin = xp.shape[1]
    zero = g[0, 0, 0, 0] - g[0, 0, 0, 0]  # dtype-native accumulator seed
    for b in range(B):
        for co in range(Cout):
            gc = g[b, co]
            for ci in range(Cin):
                xc = xp[b, ci]
                for i in range(3):
                    s0 = zero
                    s1 = zero
                    s2 = zero
                    for h in range(H):
                        gr = gc[h]
                        xr = xc[h + i]
                        for t in range(W):
                            gv = gr[t]
                            s0 += gv * xr[t]
                            s1 += gv * xr[t + 1]
                            s2 += gv * xr[t + 2]
                    gw[co, ci, i, 0] += s0
                    gw[co, ci, i, 1] += s1
                    gw[co, ci, i, 2] += s2
    return gw


@njit(cache=True, fastmath=True)
def _im2col_nb(xp_b, kh, kw, stride, Ho, Wo):
    Cin = xp_b.shape[0]
    cols = np.empty((Cin * kh * kw, Ho * Wo), dtype=xp_b.dtype)
    idx = 0
    for ci in range(Cin):
        for i in range(kh):
            for j in range(kw):
                patch = xp_b[ci, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                cols[idx] = patch.copy().reshape(Ho * Wo)
                idx += 1
    return cols


@njit(cache=True, fastmath=True)
def _conv2d_forward_nb(xp, w2, stride, kh, kw, out):
    B = xp.shape[0]
    Cout = w2.shape[0]
    Ho, Wo = out.shape[2], out.shape[3]
    for b in range(B):
        cols = _im2col_nb(xp[b], kh, kw, stride, Ho, Wo)
        r = np.dot(w2, cols)
        out[b] = r.reshape(Cout, Ho, Wo)
    return out


@njit(cache=True, fastmath=True)
def _conv2d_input_grad_nb(gout, w2t, stride, kh, kw, gxp):
    B, Cout, Ho, Wo = gout.shape
    Cin = gxp.shape[1]
    for b in range(B):
        g2 = np.ascontiguousarray(gout[b]).reshape(Cout, Ho * Wo)
        gcols = np.dot(w2t, g2)
        idx = 0
        for ci in range(Cin):
            for i in range(kh):
                for j in range(kw):
                    gxp[b, ci, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[idx].reshape(Ho, Wo)
                    )
                    idx += 1
    return gxp


@njit(cache=True, fastmath=True)
def _conv2d_weight_grad_nb(gout, xp, stride, kh, kw, gw2t):
    B, Cout, Ho, Wo = gout.shape
    for b in range(B):
        cols = _im2col_nb(xp[b], kh, kw, stride, Ho, Wo)
        g2t = np.ascontiguousarray(gout[b].reshape(Cout, Ho * Wo).T)
        gw2t += np.dot(cols, g2t)
    return gw2t


# ---------------------------------------------------------------------------
# public dispatchers


def _validate(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError("conv2d input smaller than kernel after padding")
    if x.dtype != w.dtype:
        raise DimensionError(f"conv2d dtype mismatch: {x.dtype} vs {w.dtype}")


def pad_input(x, padding):
    """Zero-pad the two spatial axes; always returns a fresh contiguous array."""
    if padding == 0:
        return np.ascontiguousarray(x)
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    return xp


def conv2d_forward(x, w, b, stride, padding, xp=None):
    """Cross-correlation of NCHW input with OIHW weight, optional bias.

    ``xp`` may carry a pre-padded copy of ``x`` to share with the backward
    kernels.
    """
    _validate(x, w, stride, padding)
    B, _, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = conv_out_extent(H, kh, stride, padding)
    Wo = conv_out_extent(W, kw, stride, padding)
    if xp is None:
        xp = pad_input(x, padding)
    if _BACKEND == "numba":
        out = np.empty((B, Cout, Ho, Wo), dtype=x.dtype)
        if kh == kw == 3 and stride == 1:
            _conv3x3_fwd_nb(xp, np.ascontiguousarray(w), out)
        else:
            _conv2d_forward_nb(xp, np.ascontiguousarray(w.reshape(Cout, -1)), stride, kh, kw, out)
    else:
        out = _conv2d_forward_np(xp, w, stride, Ho, Wo)
    if b is not None:
        out += b.reshape(1, Cout, 1, 1)
    return out


def conv2d_input_grad(gout, w, x_shape, stride, padding):
    B, Cin, H, W = x_shape
    Cout, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    gout = np.ascontiguousarray(gout)
    if _BACKEND == "numba":
        gxp = np.zeros((B, Cin, Hp, Wp), dtype=gout.dtype)
        if kh == kw == 3 and stride == 1:
            _conv3x3_igrad_nb(gout, np.ascontiguousarray(w), gxp)
        else:
            w2t = np.ascontiguousarray(w.reshape(Cout, -1).T)
            _conv2d_input_grad_nb(gout, w2t, stride, kh, kw, gxp)
    else:
        gxp = _conv2d_input_grad_np(gout, w, (B, Cin, Hp, Wp), stride)
    gx = gxp[:, :, padding:padding + H, padding:padding + W]
    gx = np.ascontiguousarray(gx)
    if CONV_INPUT_GRAD_NUDGE:
        gx[0, 0, 0, 0] += CONV_INPUT_GRAD_NUDGE
    return gx


def conv2d_weight_grad(gout, x, w_shape, stride, padding, xp=None):
    Cout, Cin, kh, kw = w_shape
    if xp is None:
        xp = pad_input(x, padding)
    gout = np.ascontiguousarray(gout)
    if _BACKEND == "numba":
        if kh == kw == 3 and stride == 1:
            gw = np.zeros(w_shape, dtype=gout.dtype)
            _conv3x3_wgrad_nb(gout, xp, gw)
        else:
            gw2t = np.zeros((Cin * kh * kw, Cout), dtype=gout.dtype)
            _conv2d_weight_grad_nb(gout, xp, stride, kh, kw, gw2t)
            gw = np.ascontiguousarray(gw2t.T).reshape(w_shape)
    else:
        gw = _conv2d_weight_grad_np(gout, xp, w_shape, stride)
    return gw


def conv2d_bias_grad(gout):
    return gout.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# paired image/mask rotation (augmentation hot loop)


@njit(cache=True, fastmath=True)
def _rotate_pair_nb(image, mask, cos_a, sin_a, fill_label, out_img, out_mask):
    C, H, W = image.shape
    cy = (H - 1) / 2.0
    cx = (W - 1) / 2.0
    for y in range(H):
        py = y - cy
        for x in range(W):
            px = x - cx
            sy = cos_a * py - sin_a * px + cy
            sx = sin_a * py + cos_a * px + cx
            if 0.0 <= sy <= H - 1 and 0.0 <= sx <= W - 1:
                y0 = int(sy)
                x0 = int(sx)
                y1 = min(y0 + 1, H - 1)
                x1 = min(x0 + 1, W - 1)
                wy = sy - y0
                wx = sx - x0
                for c in range(C):
                    top = image[c, y0, x0] * (1 - wx) + image[c, y0, x1] * wx
                    bot = image[c, y1, x0] * (1 - wx) + image[c, y1, x1] * wx
                    out_img[c, y, x] = top * (1 - wy) + bot * wy
                out_mask[y, x] = mask[int(round(sy)), int(round(sx))]
            else:
                for c in range(C):
                    out_img[c, y, x] = 0.0
                out_mask[y, x] = fill_label
    return out_img


_ROTATE_GRIDS = {}


def _rotate_pair_np(image, mask, cos_a, sin_a, fill_label):
    C, H, W = image.shape
    key = (H, W)
    grid = _ROTATE_GRIDS.get(key)
    if grid is None:
        yy, xx = np.meshgrid(
            np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij"
        )
        grid = (yy - (H - 1) / 2.0, xx - (W - 1) / 2.0)
        _ROTATE_GRIDS[key] = grid
    py, px = grid
    sy = cos_a * py - sin_a * px + (H - 1) / 2.0
    sx = sin_a * py + cos_a * px + (W - 1) / 2.0
    inside = (sy >= 0) & (sy <= H - 1) & (sx >= 0) & (sx <= W - 1)
    sy_c = np.clip(sy, 0, H - 1)
    sx_c = np.clip(sx, 0, W - 1)
    y0 = sy_c.astype(np.int64)
    x0 = sx_c.astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (sy_c - y0).astype(image.dtype)
    wx = (sx_c - x0).astype(image.dtype)
    flat = image.reshape(C, -1)
    i00 = (y0 * W + x0).ravel()
    i01 = (y0 * W + x1).ravel()
    i10 = (y1 * W + x0).ravel()
    i11 = (y1 * W + x1).ravel()
    wxr, wyr = wx.ravel(), wy.ravel()
    top = flat[:, i00] * (1 - wxr) + flat[:, i01] * wxr
    bot = flat[:, i10] * (1 - wxr) + flat[:, i11] * wxr
    out_img = ((top * (1 - wyr) + bot * wyr) * inside.ravel()).reshape(image.shape)
    yn = np.rint(sy_c).astype(np.int64)
    xn = np.rint(sx_c).astype(np.int64)
    out_mask = np.where(inside, mask[yn, xn], mask.dtype.type(fill_label))
    return out_img.astype(image.dtype), out_mask


def rotate_pair(image, mask, angle_deg, fill_label):
    """Rotate a (C,H,W) image (bilinear, zero fill) and its (H,W) mask
    (nearest, ``fill_label`` fill) by the same angle about the center."""
    rad = np.deg2rad(angle_deg)
    cos_a, sin_a = float(np.cos(rad)), float(np.sin(rad))
    if _BACKEND == "numba":
        out_img = np.empty_like(image)
        out_mask = np.empty_like(mask)
        _rotate_pair_nb(image, mask, cos_a, sin_a, mask.dtype.type(fill_label),
                        out_img, out_mask)
        return out_img, out_mask
    return _rotate_pair_np(image, mask, cos_a, sin_a, fill_label)


_init_backend()
