"""Dense float tensors with reverse-mode automatic differentiation.

The operation set is exactly what the segmentation pipeline needs: dense
arithmetic, shape movement, convolution, pixel (un)shuffle, bilinear
resizing, the normalization/activation zoo, and attention building blocks.
Every op that produces a tensor from tracked inputs records a tape node
(op name, parent references, backward closure); ``backward`` replays the
tape once in reverse creation order and accumulates gradients additively
into every ``requires_grad`` leaf.

Layout convention for image-like data is NCHW. Tensors are float32 by
default; gradient checking runs in float64.
"""

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DimensionError
from .resample import bilinear_matrix

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True
_seq = itertools.count()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional tape node.

    ``grad`` accumulates additively across backward passes and shared
    subgraphs; call :meth:`zero_grad` between optimization steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _result(data, parents, op, backward_fn):
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Reverse-mode sweep from a scalar loss over the recorded tape.

    Visits each tape node exactly once, in reverse creation order (a valid
    topological order since parents always precede children). Leaf
    gradients accumulate; intermediate node state is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with an empty tape")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # rebinding (never in-place) keeps aliased grad arrays safe
            parent.grad = g if parent.grad is None else parent.grad + g
        node._backward = None
        node._parents = ()
        if node is not loss:
            node.grad = None
    loss.grad = None if loss._op != "leaf" else loss.grad


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(x, y):
    def bwd(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _result(x.data + y.data, (x, y), "add", bwd)


def sub(x, y):
    def bwd(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _result(x.data - y.data, (x, y), "sub", bwd)


def mul(x, y):
    def bwd(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _result(x.data * y.data, (x, y), "mul", bwd)


def neg(x):
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


def add_scalar(x, s):
    return _result(x.data + x.dtype.type(s), (x,), "add_scalar", lambda g: (g,))


def mul_scalar(x, s):
    s = x.dtype.type(s)
    return _result(x.data * s, (x,), "mul_scalar", lambda g: (g * s,))


def pow_scalar(x, p):
    """Elementwise x**p for scalar p; non-integer p assumes x >= 0.

    For p < 1 the derivative clamps the base at 1e-12 so that a base of
    exactly zero (saturated focal pixels, ignored pixels) stays finite.
    """
    y = x.data ** p

    def bwd(g):
        base = np.maximum(x.data, 1e-12) if p < 1 else x.data
        return (g * p * base ** (p - 1),)

    return _result(y, (x,), "pow", bwd)


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), "exp", lambda g: (g * y,))


def log(x):
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def matmul(x, y):
    def bwd(g):
        gx = np.matmul(g, np.swapaxes(y.data, -1, -2))
        gy = np.matmul(np.swapaxes(x.data, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _result(np.matmul(x.data, y.data), (x, y), "matmul", bwd)


def sum_(x, axis=None, keepdims=False):
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)

    return _result(y, (x,), "sum", bwd)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul_scalar(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape movement


def reshape(x, shape):
    def bwd(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), "reshape", bwd)


def transpose(x, axes):
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", bwd)


def concat(parts, axis):
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", bwd)


def split(x, sections, axis):
    """Split into equal sections along axis; inverse of concat."""
    if x.shape[axis] % sections:
        raise DimensionError(f"cannot split extent {x.shape[axis]} into {sections} sections")
    pieces = np.split(x.data, sections, axis=axis)
    outs = []
    step = x.shape[axis] // sections
    for k, piece in enumerate(pieces):
        def bwd(g, k=k):
            full = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(k * step, (k + 1) * step)
            full[tuple(sl)] = g
            return (full,)

        outs.append(_result(piece, (x,), "split", bwd))
    return outs


def roll(x, shifts, axes):
    def bwd(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _result(np.roll(x.data, shifts, axis=axes), (x,), "roll", bwd)


def take_rows(table, idx):
    """Row gather table[idx] (embedding lookup); scatter-add backward."""
    idx = np.asarray(idx)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _result(table.data[idx], (table,), "take_rows", bwd)


# ---------------------------------------------------------------------------
# activations and normalization


def relu(x):
    def bwd(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0), (x,), "relu", bwd)


def gelu(x):
    """Exact gaussian-error-linear unit, 0.5*x*(1 + erf(x/sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return ((cdf + x.data * pdf).astype(x.dtype) * g,)

    return _result((x.data * cdf).astype(x.dtype), (x,), "gelu", bwd)


def softmax(x, axis):
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", bwd)


def log_softmax(x, axis):
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), "log_softmax", bwd)


def layer_norm(x, gain, shift, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    m = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar

    def bwd(g):
        dxhat = g * gain.data
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        dx = (ivar / m) * (
            m * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dshift

    return _result(xhat * gain.data + shift.data, (x, gain, shift), "layer_norm", bwd)


def batch_norm(x, gain, shift, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (B, H, W) of an NCHW tensor.

    In training mode normalizes with batch statistics and folds them into
    the running buffers in place (biased variance, consistent with the
    normalization itself); in eval mode uses the running buffers, which
    makes the op a fixed affine map.
    """
    axes = (0, 2, 3)
    cview = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(cview)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        xc = x.data - mu.reshape(cview)
        var = running_var.astype(x.dtype)
    ivar = (1.0 / np.sqrt(var + eps)).reshape(cview)
    xhat = xc * ivar
    y = xhat * gain.data.reshape(cview) + shift.data.reshape(cview)

    def bwd(g):
        dgain = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        dxhat = g * gain.data.reshape(cview)
        if training:
            m = x.data.size // x.shape[1]
            dx = (ivar / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * ivar
        return dx, dgain, dshift

    return _result(y, (x, gain, shift), "batch_norm", bwd)


# ---------------------------------------------------------------------------
# linear algebra layers


def linear(x, w, b=None):
    """x @ w + b over the last axis; x (..., din), w (din, dout)."""
    y = np.matmul(x.data, w.data)
    if b is not None:
        y = y + b.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = np.matmul(g, w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(y, parents, "linear", bwd)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation (no kernel flip) of NCHW input with OIHW weight.

    The padded input is shared between the forward pass and the weight
    gradient, so each call pads exactly once.
    """
    bias = b.data if b is not None else None
    xp = None
    if x.ndim == 4 and x.dtype == w.dtype:
        xp = kernels.pad_input(x.data, padding)
    y = kernels.conv2d_forward(x.data, w.data, bias, stride, padding, xp=xp)

    def bwd(g):
        gx = kernels.conv2d_input_grad(g, w.data, x.shape, stride, padding)
        gw = kernels.conv2d_weight_grad(g, x.data, w.shape, stride, padding, xp=xp)
        if b is not None:
            return gx, gw, kernels.conv2d_bias_grad(g)
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return _result(y, parents, "conv2d", bwd)


# ---------------------------------------------------------------------------
# pixel shuffling and resizing


def _shuffle_data(a, r):
    B, C2, H, W = a.shape
    C = C2 // (r * r)
    return (
        a.reshape(B, C, r, r, H, W)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(B, C, H * r, W * r)
    )


def _unshuffle_data(a, r):
    B, C, Hr, Wr = a.shape
    H, W = Hr // r, Wr // r
    return (
        a.reshape(B, C, H, r, W, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, C * r * r, H, W)
    )


def pixel_shuffle(x, r):
    """out[b, c, h*r+i, w*r+j] = in[b, c*r*r + i*r + j, h, w]."""
    if x.ndim != 4:
        raise DimensionError("pixel_shuffle expects an NCHW tensor")
    if x.shape[1] % (r * r):
        raise DimensionError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    if r == 1:
        return _result(x.data.copy(), (x,), "pixel_shuffle", lambda g: (g,))

    def bwd(g):
        return (np.ascontiguousarray(_unshuffle_data(g, r)),)

    return _result(np.ascontiguousarray(_shuffle_data(x.data, r)), (x,), "pixel_shuffle", bwd)


def pixel_unshuffle(x, r):
    """Exact inverse of pixel_shuffle with the same r."""
    if x.ndim != 4:
        raise DimensionError("pixel_unshuffle expects an NCHW tensor")
    if x.shape[2] % r or x.shape[3] % r:
        raise DimensionError(
            f"pixel_unshuffle: extents {x.shape[2]}x{x.shape[3]} not divisible by r={r}"
        )
    if r == 1:
        return _result(x.data.copy(), (x,), "pixel_unshuffle", lambda g: (g,))

    def bwd(g):
        return (np.ascontiguousarray(_shuffle_data(g, r)),)

    return _result(np.ascontiguousarray(_unshuffle_data(x.data, r)), (x,), "pixel_unshuffle", bwd)


_BILINEAR_CACHE = {}


def _interp_matrix(src, dst, dtype):
    key = (src, dst, np.dtype(dtype).name)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = bilinear_matrix(src, dst, dtype=dtype)
        _BILINEAR_CACHE[key] = m
    return m


def bilinear_resize(x, out_h, out_w):
    """Differentiable bilinear resize with half-pixel centers.

    Realized as two interpolation-matrix products, so the backward pass is
    the exact adjoint of the forward map.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize target {out_h}x{out_w} must be >= 1x1")
    if x.ndim != 4:
        raise DimensionError("bilinear_resize expects an NCHW tensor")
    _, _, h, w = x.shape
    mh = _interp_matrix(h, out_h, x.dtype)
    mw = _interp_matrix(w, out_w, x.dtype)
    y = np.matmul(np.matmul(mh, x.data), mw.T)

    def bwd(g):
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return _result(y, (x,), "bilinear_resize", bwd)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Worst relative gradient error per input, plus the overall verdict."""

    def __init__(self, max_rel_err, per_input, tol, checked=0, skipped=0):
        self.max_rel_err = max_rel_err
        self.per_input = per_input
        self.tol = tol
        self.checked = checked
        self.skipped = skipped
        self.passed = max_rel_err < tol and checked > 0

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({state}, max_rel_err={self.max_rel_err:.3e}, "
            f"tol={self.tol:.1e}, checked={self.checked}, skipped={self.skipped})"
        )


def grad_check(fn, inputs, tol=1e-4, eps=1e-3, rng=None, max_coords_per_input=None,
               kink_filter=False):
    """Compare analytic gradients of ``fn(*inputs)`` to central differences.

    ``fn`` maps the given float64 tensors to one output tensor; the check
    contracts the output with a fixed random weighting so the full Jacobian
    action is probed. Relative error uses ``|a - n| / max(1, |a|, |n|)``,
    i.e. absolute error for small gradients. Coordinates may be subsampled
    for large inputs; sampling is deterministic in ``rng``.

    ``kink_filter`` is for piecewise-linear compositions (relu networks): a
    central difference whose stencil straddles a kink does not estimate the
    derivative at the base point at any step size, so each coordinate is
    measured at ``eps`` and ``eps/2`` and skipped when the two disagree.
    The filter sees only finite differences, never the analytic value, so a
    wrong gradient at smooth coordinates is still caught; the report counts
    checked and skipped coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
        t.zero_grad()

    out = fn(*inputs)
    weights = constant(rng.standard_normal(out.shape))
    loss = sum_(mul(out, weights))
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def eval_loss():
        with no_grad():
            return float((fn(*inputs).data * weights.data).sum())

    def central(flat, c, step):
        orig = flat[c]
        flat[c] = orig + step
        f_plus = eval_loss()
        flat[c] = orig - step
        f_minus = eval_loss()
        flat[c] = orig
        return (f_plus - f_minus) / (2 * step)

    max_err = 0.0
    per_input = []
    checked = skipped = 0
    for t, ag in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        for c in coords:
            numeric = central(flat, c, eps)
            if kink_filter:
                numeric_half = central(flat, c, eps / 2)
                if abs(numeric - numeric_half) > 1e-3 * max(1.0, abs(numeric), abs(numeric_half)):
                    skipped += 1
                    continue
                numeric = numeric_half
            checked += 1
            a = ag.reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        per_input.append(worst)
        max_err = max(max_err, worst)
    return GradCheckReport(max_err, per_input, tol, checked, skipped)
