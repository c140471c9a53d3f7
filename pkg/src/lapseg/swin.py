"""Hierarchical windowed-attention encoder.

Tokens live in (B, h, w, C) layout between blocks; stage outputs are
returned as NCHW feature maps for the decoder. Attention is restricted to
non-overlapping MxM windows; alternating blocks shift the window grid by
floor(M/2) and mask token pairs that were not spatially contiguous before
the cyclic shift.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, Parameter

# Large finite negative keeps tensors inf-free while exp() underflows to
# exactly zero, so masked attention weights are exactly zero.
MASK_NEG = -1e9


@dataclass
class SwinEncoderConfig:
    """Geometry of the encoder; the default is a desk-scale toy model.

    The reference four-stage geometry (Swin-B would be embed_dim=128,
    depths (2,2,18,2), heads (4,8,16,32)) is accepted through the same
    fields. Two- or three-stage configs are allowed for reduced-geometry
    gradient checking.
    """

    embed_dim: int = 32
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    window: int = 7
    patch: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if not 2 <= len(self.depths) <= 4:
            raise ConfigError(f"encoder needs 2..4 stages, got {len(self.depths)}")
        if len(self.heads) != len(self.depths):
            raise ConfigError("depths and heads must have equal length")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ConfigError(f"stage {i} channels not divisible by {h} heads")

    @property
    def stages(self):
        return len(self.depths)

    def stage_channels(self):
        return [self.embed_dim * 2**i for i in range(self.stages)]

    def validate_extent(self, extent):
        if extent % self.patch:
            raise ConfigError(f"extent {extent} not divisible by patch size {self.patch}")
        grid = extent // self.patch
        for i in range(self.stages):
            g = grid >> i
            if g == 0 or (grid % (1 << i)):
                raise ConfigError(f"extent {extent} too small for {self.stages} stages")
            if g % self.window:
                raise ConfigError(
                    f"stage {i} grid {g} not divisible by window size {self.window}"
                )


_MASK_CACHE = {}


def shifted_window_mask(h, w, window, shift):
    """(num_windows, M^2, M^2) additive mask for a shifted partition.

    Built directly in shifted (rolled) coordinates: the three slice bands
    per axis distinguish the contiguous interior from the two wrapped
    fragments, and pairs from different bands inside one window are
    excluded.
    """
    key = (h, w, window, shift)
    mask = _MASK_CACHE.get(key)
    if mask is not None:
        return mask
    ids = np.zeros((h, w), dtype=np.int64)
    bands = lambda n: ((0, n - window), (n - window, n - shift), (n - shift, n))
    cnt = 0
    for h0, h1 in bands(h):
        for w0, w1 in bands(w):
            ids[h0:h1, w0:w1] = cnt
            cnt += 1
    idw = (
        ids.reshape(h // window, window, w // window, window)
        .transpose(0, 2, 1, 3)
        .reshape(-1, window * window)
    )
    mask = np.where(idw[:, :, None] != idw[:, None, :], MASK_NEG, 0.0)
    _MASK_CACHE[key] = mask
    return mask


def window_partition(x, window, shift=0):
    """Partition (B,H,W,C) tokens into (B*nW, M^2, C) windows plus a mask.

    A nonzero shift cyclically rolls the grid by (-shift, -shift) first and
    returns the wrap-exclusion mask; shift=0 returns mask None.
    """
    B, H, W, C = x.shape
    if H % window or W % window:
        raise DimensionError(f"grid {H}x{W} not divisible by window {window}")
    mask = None
    if shift:
        x = T.roll(x, (-shift, -shift), axes=(1, 2))
        mask = shifted_window_mask(H, W, window, shift)
    x = T.reshape(x, (B, H // window, window, W // window, window, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    windows = T.reshape(x, (B * (H // window) * (W // window), window * window, C))
    return windows, mask


def window_reverse(windows, window, H, W, shift=0):
    """Inverse of window_partition (including the roll)."""
    nW = (H // window) * (W // window)
    B = windows.shape[0] // nW
    x = T.reshape(windows, (B, H // window, W // window, window, window, windows.shape[-1]))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, H, W, windows.shape[-1]))
    if shift:
        x = T.roll(x, (shift, shift), axes=(1, 2))
    return x


def relative_position_index(window):
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + window - 1
    return rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]


class WindowAttention(Module):
    """Multi-head scaled dot-product attention inside one window.

    Adds a learned relative position bias per head (zero-initialized, so a
    fresh model attends without bias).
    """

    def __init__(self, dim, heads, window, rng, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, dim * 3, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.bias_table = Parameter(
            np.zeros(((2 * window - 1) ** 2, heads), dtype=dtype)
        )
        self.rel_index = relative_position_index(window)

    def forward(self, windows, mask=None):
        Bn, L, C = windows.shape
        h = self.heads
        hd = C // h
        qkv = self.qkv(windows)
        qkv = T.reshape(qkv, (Bn, L, 3, h, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (T.reshape(p, (Bn, h, L, hd)) for p in T.split(qkv, 3, axis=0))
        attn = T.matmul(T.mul_scalar(q, self.scale), T.transpose(k, (0, 1, 3, 2)))
        bias = T.take_rows(self.bias_table, self.rel_index.reshape(-1))
        bias = T.transpose(T.reshape(bias, (L, L, h)), (2, 0, 1))
        attn = T.add(attn, T.reshape(bias, (1, h, L, L)))
        if mask is not None:
            nW = mask.shape[0]
            B = Bn // nW
            attn = T.reshape(attn, (B, nW, h, L, L))
            attn = T.add(attn, T.constant(mask.reshape(1, nW, 1, L, L), dtype=windows.dtype))
            attn = T.reshape(attn, (Bn, h, L, L))
        attn = T.softmax(attn, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (Bn, L, C))
        return self.proj(out)

    __call__ = forward


class SwinBlock(Module):
    """Pre-norm windowed attention plus a gelu MLP, both residual."""

    def __init__(self, dim, heads, window, shift, rng, mlp_ratio=4, dtype=np.float32):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng=rng, dtype=dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng=rng, dtype=dtype)

    def forward(self, x):
        B, H, W, C = x.shape
        windows, mask = window_partition(self.norm1(x), self.window, self.shift)
        attended = self.attn(windows, mask)
        x = T.add(x, window_reverse(attended, self.window, H, W, self.shift))
        y = self.fc2(T.gelu(self.fc1(self.norm2(x))))
        return T.add(x, y)

    __call__ = forward


class PatchEmbed(Module):
    """Linear embedding of non-overlapping p x p patches, then layer norm."""

    def __init__(self, patch, in_channels, embed_dim, rng, dtype=np.float32):
        super().__init__()
        self.patch = patch
        self.in_channels = in_channels
        self.proj = Linear(in_channels * patch * patch, embed_dim, rng=rng, dtype=dtype)
        self.norm = LayerNorm(embed_dim, dtype=dtype)

    def forward(self, x):
        B, C, H, W = x.shape
        p = self.patch
        if C != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} channels, got {C}")
        if H % p or W % p:
            raise DimensionError(f"extents {H}x{W} not divisible by patch {p}")
        x = T.reshape(x, (B, C, H // p, p, W // p, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (B, H // p, W // p, C * p * p))
        return self.norm(self.proj(x))

    __call__ = forward


class PatchMerging(Module):
    """Concatenate 2x2 token neighborhoods, normalize, reduce 4C -> 2C."""

    def __init__(self, dim, rng, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, 2 * dim, bias=False, rng=rng, dtype=dtype)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise DimensionError(f"patch merging needs even extents, got {H}x{W}")
        x = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (B, H // 2, W // 2, 4 * C))
        return self.reduce(self.norm(x))

    __call__ = forward


class SwinEncoder(Module):
    """Patch embedding, staged attention blocks, and patch merging.

    ``forward`` returns all stage outputs (as NCHW maps) for the decoder's
    skip connections; stage s halves the grid and doubles the channels of
    stage s-1.
    """

    def __init__(self, cfg: SwinEncoderConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.in_channels, cfg.embed_dim, rng, dtype=dtype)
        self.stages = []
        self.merges = []
        for i in range(cfg.stages):
            dim = cfg.embed_dim * 2**i
            blocks = [
                SwinBlock(
                    dim, cfg.heads[i], cfg.window,
                    shift=0 if b % 2 == 0 else cfg.window // 2,
                    rng=rng, dtype=dtype,
                )
                for b in range(cfg.depths[i])
            ]
            self.stages.append(blocks)
            if i < cfg.stages - 1:
                self.merges.append(PatchMerging(dim, rng, dtype=dtype))

    def _children(self):
        yield "embed", self.embed
        for i, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield f"stages.{i}.{b}", block
        for i, merge in enumerate(self.merges):
            yield f"merges.{i}", merge

    def forward(self, image):
        B, C, H, W = image.shape
        if H != W:
            raise ConfigError(f"encoder expects square inputs, got {H}x{W}")
        self.cfg.validate_extent(H)
        x = self.embed(image)
        pyramid = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            pyramid.append(T.transpose(x, (0, 3, 1, 2)))
            if i < len(self.merges):
                x = self.merges[i](x)
        return pyramid

    __call__ = forward
