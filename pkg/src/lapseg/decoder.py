"""Nested decoder with dense skip connections and the internal segmenter.

Decoder nodes form the triangular grid (i, j) with i + j <= L - 1: node
(i, j) concatenates every same-level predecessor (the encoder map acts as
(i, 0)) with the 2x-upsampled node (i+1, j-1), then runs two
conv-batchnorm-relu units. A 1x1 head maps the top node to class scores,
lifted bilinearly from the patch grid back to the input resolution.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .swin import SwinEncoder, SwinEncoderConfig


class DecoderBlock(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, k=3, padding=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, k=3, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))

    __call__ = forward


class SegHead(Module):
    """1x1 projection to class scores."""

    def __init__(self, cin, classes, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv2d(cin, classes, k=1, padding=0, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.proj(x)

    __call__ = forward


def decoder_node_count(levels):
    """Nested nodes with j >= 1 for an L-level pyramid."""
    return sum(levels - 1 - i for i in range(levels - 1))


class NestedDecoder(Module):
    """U-Net++-style grid of decoder nodes over an encoder pyramid."""

    def __init__(self, enc_channels, classes, rng, widths=None, lift=4, dtype=np.float32):
        super().__init__()
        L = len(enc_channels)
        if L < 2:
            raise ConfigError("decoder needs at least a 2-level pyramid")
        self.levels = L
        self.enc_channels = list(enc_channels)
        self.widths = list(widths) if widths is not None else list(enc_channels)
        if len(self.widths) != L:
            raise ConfigError("decoder widths must match pyramid depth")
        self.lift = lift
        self.nodes = {}
        blocks = []
        for j in range(1, L):
            for i in range(L - j):
                below = self.enc_channels[i + 1] if j == 1 else self.widths[i + 1]
                same = self.enc_channels[i] + (j - 1) * self.widths[i]
                block = DecoderBlock(same + below, self.widths[i], rng, dtype=dtype)
                self.nodes[(i, j)] = block
                blocks.append(block)
        self.blocks = blocks
        self.head = SegHead(self.widths[0], classes, rng, dtype=dtype)

    def forward(self, pyramid, drop=None):
        """Evaluate nodes in dependency order; ``drop=(i, j, src)`` zeroes
        one concatenated source of node (i, j) (ablation support)."""
        L = self.levels
        if len(pyramid) != L:
            raise DimensionError(f"expected a {L}-level pyramid, got {len(pyramid)}")
        for i, f in enumerate(pyramid):
            if f.shape[1] != self.enc_channels[i]:
                raise DimensionError(
                    f"pyramid level {i} has {f.shape[1]} channels, expected {self.enc_channels[i]}"
                )
            if i and f.shape[2] * 2 != pyramid[i - 1].shape[2]:
                raise DimensionError("pyramid extents must halve per level")
        grid = {(i, 0): pyramid[i] for i in range(L)}
        for j in range(1, L):
            for i in range(L - j):
                _, _, h, w = grid[(i, 0)].shape
                sources = [grid[(i, m)] for m in range(j)]
                sources.append(T.bilinear_resize(grid[(i + 1, j - 1)], h, w))
                if drop is not None and drop[:2] == (i, j):
                    s = sources[drop[2]]
                    sources[drop[2]] = T.constant(np.zeros_like(s.data))
                grid[(i, j)] = self.nodes[(i, j)](T.concat(sources, axis=1))
        scores = self.head(grid[(0, L - 1)])
        if self.lift != 1:
            _, _, h, w = scores.shape
            scores = T.bilinear_resize(scores, h * self.lift, w * self.lift)
        return scores

    __call__ = forward


class InternalSegmenter(Module):
    """Fixed-resolution encoder + nested decoder producing class scores.

    The resizers are the only sanctioned path to other input sizes, so any
    other resolution is rejected here.
    """

    def __init__(self, cfg: SwinEncoderConfig, classes, resolution=224, rng=None,
                 decoder_widths=None, dtype=np.float32):
        super().__init__()
        cfg.validate_extent(resolution)
        self.resolution = resolution
        self.classes = classes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = SwinEncoder(cfg, rng, dtype=dtype)
        self.decoder = NestedDecoder(
            cfg.stage_channels(), classes, rng,
            widths=decoder_widths, lift=cfg.patch, dtype=dtype,
        )

    def forward(self, image):
        B, C, H, W = image.shape
        if (H, W) != (self.resolution, self.resolution):
            raise ContractError(
                f"internal segmenter runs at {self.resolution}x{self.resolution}, "
                f"got {H}x{W}; wrap it in resizers for other sizes"
            )
        return self.decoder(self.encoder(image))

    __call__ = forward
