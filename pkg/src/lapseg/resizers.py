"""Trainable pyramid resizers and their fixed bilinear counterparts.

Both networks are cascades of 2x scaling levels. Each level combines a
parameter-free bilinear rescale of the running signal (the deconstruction
or reconstruction branch) with a learned residual from a feature branch
built on pixel (un)shuffling. The residual head of every level is
zero-initialized, so a freshly built or fully zeroed network reproduces
cascaded bilinear resizing exactly; the uniform (non-trainable) resizer is
that special case with no parameters at all.
"""

from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module

RESIZER_KINDS = ("trainable", "uniform", "none")


class ConvStack(Module):
    """(conv -> batch_norm -> relu) repeated ``depth`` times."""

    def __init__(self, cin, channels, depth, rng, dtype=np.float32):
        super().__init__()
        self.convs = []
        self.norms = []
        c = cin
        for _ in range(depth):
            self.convs.append(Conv2d(c, channels, k=3, padding=1, rng=rng, dtype=dtype))
            self.norms.append(BatchNorm2d(channels, dtype=dtype))
            c = channels
        self.out_channels = channels

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return x

    __call__ = forward


class DesubpixelBlock(Module):
    """Pixel unshuffle (r=2) followed by a conv stack; halves extents."""

    def __init__(self, cin, channels, depth, rng, dtype=np.float32):
        super().__init__()
        self.stack = ConvStack(cin * 4, channels, depth, rng, dtype=dtype)
        self.out_channels = channels

    def forward(self, x):
        return self.stack(T.pixel_unshuffle(x, 2))

    __call__ = forward


class SubpixelBlock(Module):
    """Conv stack at low resolution, then one pixel shuffle (r=2).

    Working channels must be divisible by 4; the shuffled output carries
    channels/4 feature maps at doubled extents.
    """

    def __init__(self, cin, channels, depth, rng, dtype=np.float32):
        super().__init__()
        if channels % 4:
            raise ConfigError(f"subpixel working channels must be divisible by 4, got {channels}")
        self.stack = ConvStack(cin, channels, depth, rng, dtype=dtype)
        self.out_channels = channels // 4

    def forward(self, x):
        return T.pixel_shuffle(self.stack(x), 2)

    __call__ = forward


class PyramidDownsampler(Module):
    """k-level trainable downsampler: (B,C,H,W) -> (B,C,H/2^k,W/2^k)."""

    def __init__(self, levels, channels=32, depth=2, in_channels=3, rng=None, dtype=np.float32):
        super().__init__()
        self.levels = levels
        self.blocks = [
            DesubpixelBlock(in_channels, channels, depth, rng, dtype=dtype) for _ in range(levels)
        ]
        # residual heads map working channels back to the image channels;
        # zero init makes the initial network equal its bilinear branch
        self.heads = [
            Conv2d(channels, in_channels, k=3, padding=1, init="zero", rng=rng, dtype=dtype)
            for _ in range(levels)
        ]

    def forward(self, x):
        _, _, h, w = x.shape
        f = 2 ** self.levels
        if h % f or w % f:
            raise DimensionError(
                f"downsampler with {self.levels} levels needs extents divisible by {f}, "
                f"got {h}x{w}"
            )
        for block, head in zip(self.blocks, self.heads):
            _, _, h, w = x.shape
            base = T.bilinear_resize(x, h // 2, w // 2)
            x = T.add(base, head(block(x)))
        return x

    __call__ = forward


class PyramidUpsampler(Module):
    """k-level trainable upsampler of class-score maps: 2^k per axis."""

    def __init__(self, levels, classes, channels=32, depth=2, rng=None, dtype=np.float32):
        super().__init__()
        self.levels = levels
        self.blocks = [
            SubpixelBlock(classes, channels, depth, rng, dtype=dtype) for _ in range(levels)
        ]
        self.heads = [
            Conv2d(channels // 4, classes, k=3, padding=1, init="zero", rng=rng, dtype=dtype)
            for _ in range(levels)
        ]

    def forward(self, x):
        for block, head in zip(self.blocks, self.heads):
            _, _, h, w = x.shape
            base = T.bilinear_resize(x, h * 2, w * 2)
            x = T.add(base, head(block(x)))
        return x

    __call__ = forward


class UniformResizer(Module):
    """Parameter-free cascade of 2x bilinear halvings or doublings.

    Cascading (rather than one direct 4x resize) keeps the uniform resizer
    bit-identical to a zero-residual trainable resizer.
    """

    def __init__(self, levels, direction):
        super().__init__()
        if direction not in ("down", "up"):
            raise ConfigError(f"direction must be down or up, got {direction!r}")
        self.levels = levels
        self.direction = direction

    def forward(self, x):
        for _ in range(self.levels):
            _, _, h, w = x.shape
            if self.direction == "down":
                if h % 2 or w % 2:
                    raise DimensionError(f"cannot halve odd extents {h}x{w}")
                x = T.bilinear_resize(x, h // 2, w // 2)
            else:
                x = T.bilinear_resize(x, h * 2, w * 2)
        return x

    __call__ = forward


class IdentityResizer(Module):
    def forward(self, x):
        return x

    __call__ = forward


def uniform_resize(x, scale):
    """Single-shot bilinear resize by an exact rational scale factor."""
    frac = Fraction(scale).limit_denominator(10**9)
    _, _, h, w = x.shape
    nh, nw = h * frac, w * frac
    if nh.denominator != 1 or nw.denominator != 1:
        raise ContractError(f"scale {scale} gives non-integral extents for {h}x{w}")
    return T.bilinear_resize(x, int(nh), int(nw))


def build_resizer_pair(kind, k, channels=32, classes=4, depth=2, rng=None, dtype=np.float32):
    """Construct a matched (downsampler, upsampler) pair.

    ``kind=none`` forces k=0 and yields identities. Trainable pairs are
    independently parameterized; there is no weight sharing.
    """
    if kind not in RESIZER_KINDS:
        raise ConfigError(f"unknown resizer kind {kind!r}; choose from {RESIZER_KINDS}")
    if kind == "none":
        return IdentityResizer(), IdentityResizer()
    if k not in (1, 2):
        raise ConfigError(f"resizer kind {kind!r} supports k in {{1, 2}}, got {k}")
    if kind == "uniform":
        return UniformResizer(k, "down"), UniformResizer(k, "up")
    rng = rng if rng is not None else np.random.default_rng(0)
    down = PyramidDownsampler(k, channels=channels, depth=depth, rng=rng, dtype=dtype)
    up = PyramidUpsampler(k, classes, channels=channels, depth=depth, rng=rng, dtype=dtype)
    return down, up


def zero_residual_branches(module):
    """Zero every learnable parameter of a trainable resizer in place."""
    for _, p in module.named_parameters():
        p.data[...] = 0
