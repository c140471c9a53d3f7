"""Variant assembly (resizer pair + internal segmenter) and the activation
memory estimator that motivates the outer/inner split.

The four constructible variants and their external resolutions:

    internal      224   identity resizers
    uniform_4x    896   two fixed 2x bilinear stages each way
    trainable_2x  448   one trainable pyramid level each way
    trainable_4x  896   two trainable pyramid levels each way
"""

import math

import numpy as np

from .decoder import InternalSegmenter
from .errors import ConfigError, ContractError
from .resizers import build_resizer_pair
from .swin import SwinEncoderConfig

INTERNAL_RESOLUTION = 224

# variant tag -> (resizer kind, pyramid levels, external resolution)
VARIANTS = {
    "internal": ("none", 0, 224),
    "uniform_4x": ("uniform", 2, 896),
    "trainable_2x": ("trainable", 1, 448),
    "trainable_4x": ("trainable", 2, 896),
}


class PyramidSegmenter:
    """One of the four comparable model variants.

    Forward maps (B, 3, S, S) images to (B, n, S, S) class scores where S
    is the variant's declared external resolution.
    """

    def __init__(self, variant, classes=4, encoder_cfg=None, resizer_channels=32,
                 resizer_depth=2, decoder_widths=None, seed=0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        kind, k, resolution = VARIANTS[variant]
        self.variant = variant
        self.classes = classes
        self.resolution = resolution
        rng = np.random.default_rng(seed)
        self.down, self.up = build_resizer_pair(
            kind, k, channels=resizer_channels, classes=classes,
            depth=resizer_depth, rng=rng, dtype=dtype,
        )
        cfg = encoder_cfg if encoder_cfg is not None else SwinEncoderConfig()
        self.internal = InternalSegmenter(
            cfg, classes, resolution=INTERNAL_RESOLUTION, rng=rng,
            decoder_widths=decoder_widths, dtype=dtype,
        )

    def forward(self, image):
        B, C, H, W = image.shape
        if (H, W) != (self.resolution, self.resolution):
            raise ContractError(
                f"variant {self.variant} declares resolution {self.resolution}, got {H}x{W}"
            )
        return self.up(self.internal(self.down(image)))

    __call__ = forward

    # module-protocol passthroughs over the three submodels ---------------
    def _parts(self):
        return (("down", self.down), ("internal", self.internal), ("up", self.up))

    def named_parameters(self):
        for prefix, part in self._parts():
            yield from part.named_parameters(prefix + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, part in self._parts():
            yield from part.named_buffers(prefix + ".")

    def state_tensors(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_tensors(self, tensors):
        from .errors import MissingTensorError

        own = self.state_tensors()
        missing = [n for n in own if n not in tensors]
        unexpected = [n for n in tensors if n not in own]
        if missing or unexpected:
            raise MissingTensorError(missing, unexpected)
        for name, arr in own.items():
            new = tensors[name]
            if tuple(new.shape) != tuple(arr.shape):
                raise MissingTensorError(
                    [f"{name} (shape {tuple(new.shape)} != {tuple(arr.shape)})"]
                )
            arr[...] = new.astype(arr.dtype)

    def train(self, mode=True):
        for _, part in self._parts():
            part.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# activation memory estimator
#
# Counts every operator output (conv, norm, relu, pool, upsample, attention
# map, MLP) of a forward pass, in scalar elements, then multiplies by the
# precision. Areas are treated as exact reals so the estimate is analytic
# in the input extents. Parameters are excluded by design.


def _unet_hr_elements(h, w, classes=4):
    """Classic U-Net (64..1024 channels, two conv-bn-relu units per level,
    2x2 pooling, symmetric decoder with up-convolutions) at full input
    resolution."""
    chans = [64, 128, 256, 512]
    area = float(h * w)
    total = 0.0
    # encoder: 2 x (conv + bn + relu) then pool
    for i, c in enumerate(chans):
        a = area / 4.0**i
        total += 6 * c * a
        total += c * a / 4.0
    # bridge
    total += 6 * 1024 * area / 4.0**4
    # decoder: upconv output, concat buffer, 2 x (conv + bn + relu)
    for i, c in reversed(list(enumerate(chans))):
        a = area / 4.0**i
        total += c * a
        total += 2 * c * a
        total += 6 * c * a
    total += classes * area
    return total


def _swin_encoder_elements(area, embed_dim=128, depths=(2, 2, 18, 2), heads=(4, 8, 16, 32),
                           window=7, patch=4):
    tokens0 = area / patch**2
    total = tokens0 * embed_dim * 2  # embedding + its norm
    for i, (d, nh) in enumerate(zip(depths, heads)):
        c = embed_dim * 2**i
        t = tokens0 / 4.0**i
        per_block = (
            2 * c * t        # two layer norms
            + 3 * c * t      # qkv
            + nh * t * window**2  # attention maps
            + 2 * c * t      # attention output + projection
            + (4 + 1) * c * t     # MLP hidden + out
        )
        total += d * per_block
        if i < len(depths) - 1:
            total += 4 * c * (t / 4.0) + 2 * c * (t / 4.0)  # merge concat + reduce
    return total


def _nested_decoder_elements(area, embed_dim=128, stages=4, classes=4, patch=4):
    widths = [embed_dim * 2**i for i in range(stages)]
    tokens0 = area / patch**2
    total = 0.0
    for j in range(1, stages):
        for i in range(stages - j):
            t = tokens0 / 4.0**i
            cin = widths[i] * j + widths[i + 1]
            total += cin * t       # concat buffer
            total += 6 * widths[i] * t  # two conv-bn-relu units
    total += classes * tokens0      # head
    total += classes * area         # lift to input resolution
    return total


def _resizer_elements(h, w, levels, channels=32, depth=2, classes=4):
    total = 0.0
    # downsampler level l works at the post-unshuffle area
    for l in range(1, levels + 1):
        a = float(h * w) / 4.0**l
        total += 12 * a                      # unshuffle output
        total += depth * 3 * channels * a    # conv stacks
        total += 3 * a                       # residual head
        total += 3 * a                       # bilinear branch
    # upsampler level l consumes scores at the internal area and doubles
    low = float(h * w) / 4.0**levels
    for l in range(1, levels + 1):
        total += depth * 3 * channels * low  # conv stacks at low resolution
        total += channels * low              # shuffle output (channels/4 at 4x area)
        total += 2 * classes * 4 * low       # residual head + bilinear branch
        low *= 4.0
    return total


def estimate_activation_memory(arch, height, width, precision_bytes=4, classes=4):
    """Forward-pass activation footprint in bytes for one image.

    ``unet_hr`` runs a classic U-Net at the full input resolution;
    ``swintr`` wraps the reference internal model (Swin-B geometry plus the
    nested decoder at 224) in enough pyramid levels to reach roughly the
    internal resolution. Only activations count; parameters are excluded.
    """
    if height < 1 or width < 1:
        raise ConfigError("extents must be positive")
    if arch == "unet_hr":
        return _unet_hr_elements(height, width, classes=classes) * precision_bytes
    if arch != "swintr":
        raise ConfigError(f"unknown architecture {arch!r}; choose unet_hr or swintr")
    mean_extent = math.sqrt(float(height) * float(width))
    levels = max(0, round(math.log2(mean_extent / INTERNAL_RESOLUTION)))
    internal_area = float(height * width) / 4.0**levels
    total = _swin_encoder_elements(internal_area)
    total += _nested_decoder_elements(internal_area, classes=classes)
    if levels:
        total += _resizer_elements(height, width, levels, classes=classes)
    return total * precision_bytes
