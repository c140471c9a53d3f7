"""Dataset ingestion: manifests, image/mask loading, deterministic split
handling, and a synthetic shape/bar generator for desk-scale runs.

Manifest format is plain text, one record per line:

    image_path<TAB>mask_path<TAB>split

Images are 8-bit RGB PNG; masks are single-channel 8-bit PNG whose pixel
value is the class index (255 reserved for ignore).
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .resample import resize_bilinear, resize_nearest

IGNORE_LABEL = 255
DEFAULT_CLASS_NAMES = ("background", "concrete", "steel", "metal decking")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ClassMap:
    names: tuple = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) >= IGNORE_LABEL:
            raise ConfigError("class count collides with the ignore label 255")

    @property
    def num_classes(self):
        return len(self.names)


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: str
    split: str


class DatasetManifest:
    def __init__(self, records, class_map=None):
        self.records = list(records)
        self.class_map = class_map or ClassMap()
        paths = [r.image_path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("duplicate image paths in manifest")
        for r in self.records:
            if r.split not in SPLITS:
                raise DataError(f"unknown split {r.split!r} for {r.image_path}")

    def select(self, split):
        return [r for r in self.records if r.split == split]

    def counts(self):
        return {s: len(self.select(s)) for s in SPLITS}

    def save(self, path):
        """Write the manifest; absolute record paths are stored relative to
        the manifest's own directory so the dataset stays relocatable."""
        base = Path(path).resolve().parent
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                img, mask = r.image_path, r.mask_path
                if os.path.isabs(img):
                    img = os.path.relpath(img, base)
                if os.path.isabs(mask):
                    mask = os.path.relpath(mask, base)
                fh.write(f"{img}\t{mask}\t{r.split}\n")

    @classmethod
    def load(cls, path, class_map=None, validate=False):
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        records = []
        base = path.parent
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
                img, mask, split = parts
                img = img if os.path.isabs(img) else str(base / img)
                mask = mask if os.path.isabs(mask) else str(base / mask)
                records.append(ManifestRecord(img, mask, split))
        manifest = cls(records, class_map=class_map)
        if validate:
            for r in manifest.records:
                for p in (r.image_path, r.mask_path):
                    if not os.path.exists(p):
                        raise DataError(f"missing file referenced by manifest: {p}")
                with Image.open(r.image_path) as im, Image.open(r.mask_path) as mk:
                    if im.size != mk.size:
                        raise DataError(
                            f"extent mismatch for {r.image_path}: image {im.size}, mask {mk.size}"
                        )
        return manifest


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8, class indices or 255


def load_sample(record, class_map, target_size=None):
    """Load one image/mask pair, optionally resized to a square target.

    The image resizes bilinearly and scales to [0, 1]; the mask resizes
    with nearest neighbour so no labels are invented.
    """
    try:
        with Image.open(record.image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {record.image_path}: {exc}") from exc
    try:
        with Image.open(record.mask_path) as mk:
            if mk.mode not in ("L", "P", "I", "I;16"):
                mk = mk.convert("L")
            mask = np.asarray(mk)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable mask {record.mask_path}: {exc}") from exc
    if mask.ndim != 2:
        raise DataError(f"mask {record.mask_path} is not single-channel")
    if mask.shape != image.shape[:2]:
        raise DataError(
            f"extent mismatch for {record.image_path}: image {image.shape[:2]}, mask {mask.shape}"
        )
    n = class_map.num_classes
    bad = (mask >= n) & (mask != IGNORE_LABEL)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise DataError(
            f"mask {record.mask_path} holds label {int(mask[y, x])} at pixel ({int(y)}, {int(x)}); "
            f"valid labels are 0..{n - 1} and {IGNORE_LABEL}"
        )
    image = image.transpose(2, 0, 1)
    mask = mask.astype(np.uint8)
    if target_size is not None and target_size > 0:
        image = resize_bilinear(image, target_size, target_size).astype(np.float32)
        mask = resize_nearest(mask, target_size, target_size)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask))


def split_dataset(records, val_fraction, seed):
    """Deterministically carve a validation subset out of the train flag.

    Picks round(val_fraction * |train|) records; test records are left
    untouched. The result is a partition: val and train are disjoint and
    jointly cover the original train pool.
    """
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train_pool = [r for r in records if r.split != "test"]
    test = [r for r in records if r.split == "test"]
    n_val = round(val_fraction * len(train_pool))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.permutation(len(train_pool))[:n_val].tolist())
    out = []
    for i, r in enumerate(train_pool):
        split = "val" if i in val_idx else "train"
        out.append(ManifestRecord(r.image_path, r.mask_path, split))
    out.extend(ManifestRecord(r.image_path, r.mask_path, "test") for r in test)
    return DatasetManifest(out)


# ---------------------------------------------------------------------------
# synthetic dataset

_CLASS_COLORS = np.array(
    [
        [0.20, 0.22, 0.28],  # background
        [0.80, 0.20, 0.15],
        [0.20, 0.70, 0.30],
        [0.90, 0.80, 0.20],
        [0.55, 0.30, 0.75],
        [0.15, 0.65, 0.75],
    ]
)


def _paint(image, mask, region, class_idx, rng, size):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    color = _CLASS_COLORS[class_idx]
    tex_kind = class_idx % 3
    if tex_kind == 0:
        tex = 0.78 + 0.22 * np.sin(2 * np.pi * yy / 7.0)
    elif tex_kind == 1:
        tex = 0.72 + 0.28 * (((yy // 5) + (xx // 5)) % 2)
    else:
        tex = np.full((size, size), 0.92)
    shade = tex * rng.uniform(0.9, 1.1)
    for c in range(3):
        image[c][region] = np.clip(color[c] * shade[region], 0.0, 1.0)
    mask[region] = class_idx


def _rect_region(size, rng, min_frac=0.08, max_frac=0.3):
    h = int(size * rng.uniform(min_frac, max_frac))
    w = int(size * rng.uniform(min_frac, max_frac))
    y = int(rng.integers(0, size - h))
    x = int(rng.integers(0, size - w))
    region = np.zeros((size, size), dtype=bool)
    region[y:y + h, x:x + w] = True
    return region


def _ellipse_region(size, rng):
    ry = size * rng.uniform(0.05, 0.16)
    rx = size * rng.uniform(0.05, 0.16)
    cy = rng.uniform(ry, size - ry)
    cx = rng.uniform(rx, size - rx)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _bar_region(size, rng, thickness=None):
    """A thin bar (1..3 px thick) at an arbitrary angle."""
    t = thickness if thickness is not None else int(rng.integers(1, 4))
    length = size * rng.uniform(0.3, 0.8)
    angle = rng.uniform(0, np.pi)
    cy = rng.uniform(0.2 * size, 0.8 * size)
    cx = rng.uniform(0.2 * size, 0.8 * size)
    d = np.array([np.cos(angle), np.sin(angle)])
    nrm = np.array([-d[1], d[0]])
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    py, px = yy - cy, xx - cx
    along = py * d[0] + px * d[1]
    across = py * nrm[0] + px * nrm[1]
    return (np.abs(across) <= t / 2.0) & (np.abs(along) <= length / 2.0)


def _background(size, rng):
    base = rng.uniform(0.05, 0.3, size=(3, 9, 9)).astype(np.float64)
    img = resize_bilinear(base, size, size)
    img += _CLASS_COLORS[0][:, None, None] * 0.5
    img += rng.normal(0, 0.01, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


def synth_dataset_generate(out_dir, count, size, classes=4, seed=0, style="shapes",
                           split_counts=None):
    """Write a deterministic synthetic dataset plus its manifest.

    Each non-background class appears as textured rectangles, ellipses,
    thin bars (1..3 px, exercising fine-detail retention), with exact
    masks. ``style="bars"`` biases the content toward thin structures.
    Returns the manifest; asserts every class covers at least 1% of the
    generated pixels.
    """
    if classes < 2 or classes > len(_CLASS_COLORS):
        raise ConfigError(f"classes must be in 2..{len(_CLASS_COLORS)}, got {classes}")
    out_dir = Path(out_dir).resolve()
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    if split_counts is None:
        n_val = max(1, count // 10)
        n_test = max(1, count // 10)
        split_counts = {"train": count - n_val - n_test, "val": n_val, "test": n_test}
    if sum(split_counts.values()) != count:
        raise ConfigError("split counts must sum to the total count")

    splits = []
    for name in SPLITS:
        splits.extend([name] * split_counts.get(name, 0))

    class_names = tuple(DEFAULT_CLASS_NAMES[:classes]) if classes <= 4 else tuple(
        DEFAULT_CLASS_NAMES + tuple(f"class{i}" for i in range(4, classes))
    )[:classes]
    records = []
    pixel_counts = np.zeros(classes, dtype=np.int64)
    for idx in range(count):
        rng = np.random.default_rng((seed, idx))
        image = _background(size, rng)
        mask = np.zeros((size, size), dtype=np.uint8)
        for cls in range(1, classes):
            if style == "bars":
                regions = [_rect_region(size, rng, 0.06, 0.16)]
                regions += [_bar_region(size, rng) for _ in range(4)]
            else:
                regions = [_rect_region(size, rng)]
                if rng.random() < 0.7:
                    regions.append(_ellipse_region(size, rng))
                regions.append(_bar_region(size, rng))
            for region in regions:
                _paint(image, mask, region, cls, rng, size)
        pixel_counts += np.bincount(mask.reshape(-1), minlength=classes)[:classes]
        img8 = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
        img_path = out_dir / "images" / f"{idx:05d}.png"
        mask_path = out_dir / "masks" / f"{idx:05d}.png"
        Image.fromarray(img8, mode="RGB").save(img_path)
        Image.fromarray(mask, mode="L").save(mask_path)
        records.append(
            ManifestRecord(str(img_path), str(mask_path), splits[idx])
        )

    share = pixel_counts / pixel_counts.sum()
    if (share < 0.01).any():
        raise DataError(f"synthetic class shares below 1%: {share.round(4).tolist()}")

    manifest = DatasetManifest(records, class_map=ClassMap(class_names))
    manifest.save(out_dir / "manifest.tsv")
    return manifest
