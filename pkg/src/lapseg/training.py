"""End-to-end training protocol: focal loss, Adam, a cosine learning-rate
schedule bounded by (max_lr, min_lr), augmentation, the epoch loop with
per-epoch validation IoU, and checkpoint (de)serialization."""

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DataError,
    NumericsError,
)
from .data import load_sample
from .metrics import evaluate_records, evaluate_samples
from .resample import resize_nearest

log = logging.getLogger(__name__)

IGNORE_LABEL = 255


# ---------------------------------------------------------------------------
# focal loss


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    alpha: tuple = None  # per-class weights; None means uniform 1.0
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            self.alpha = tuple(float(a) for a in self.alpha)


def focal_loss(scores, target, cfg=None):
    """Mean over non-ignored pixels of -alpha_t (1 - p_t)^gamma log(p_t).

    ``scores`` is a (B, n, H, W) tensor of unnormalized class scores;
    ``target`` a (B, H, W) integer label map. Stabilized through
    log-softmax; gamma=0 with uniform alpha is exactly cross-entropy.
    """
    cfg = cfg or FocalLossConfig()
    target = np.asarray(target)
    if scores.ndim != 4 or target.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ContractError(
            f"focal loss expects scores (B,n,H,W) with matching (B,H,W) labels, "
            f"got {scores.shape} and {target.shape}"
        )
    n = scores.shape[1]
    valid = target != cfg.ignore_label
    bad = ((target < 0) | (target >= n)) & (target != cfg.ignore_label)
    if bad.any():
        b, y, x = np.argwhere(bad)[0]
        raise DataError(
            f"label {int(target[b, y, x])} at pixel (batch {int(b)}, {int(y)}, {int(x)}) "
            f"outside 0..{n - 1}"
        )
    count = int(valid.sum())
    if count == 0:
        return T.constant(np.zeros((), dtype=scores.dtype))

    safe_target = np.where(valid, target, 0).astype(np.int64)
    onehot = np.zeros(scores.shape, dtype=scores.data.dtype)
    np.put_along_axis(onehot, safe_target[:, None], 1.0, axis=1)
    onehot *= valid[:, None]

    alpha = np.ones(n) if cfg.alpha is None else np.asarray(cfg.alpha, dtype=np.float64)
    if alpha.shape != (n,):
        raise ConfigError(f"alpha needs one weight per class, got {alpha.shape}")
    alpha_map = np.where(valid, alpha[safe_target], 0.0).astype(scores.data.dtype)

    logp = T.log_softmax(scores, axis=1)
    logp_t = T.sum_(T.mul(logp, T.constant(onehot)), axis=1)
    term = T.neg(T.mul(logp_t, T.constant(alpha_map)))
    if cfg.gamma != 0:
        p_t = T.exp(logp_t)
        modulator = T.pow_scalar(T.add_scalar(T.neg(p_t), 1.0), cfg.gamma)
        term = T.mul(modulator, term)
    return T.mul_scalar(T.sum_(term), 1.0 / count)


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class LRSchedule:
    max_lr: float = 1e-4
    min_lr: float = 1e-6
    total_epochs: int = 50


def lr_at_epoch(sched, epoch):
    """Cosine annealing pinned to lr(0)=max_lr and lr(total-1)=min_lr."""
    if not 0 <= epoch <= sched.total_epochs - 1:
        raise ContractError(f"epoch {epoch} outside 0..{sched.total_epochs - 1}")
    if sched.total_epochs == 1:
        return sched.max_lr
    frac = epoch / (sched.total_epochs - 1)
    return sched.min_lr + 0.5 * (sched.max_lr - sched.min_lr) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    hflip_p: float = 0.5
    max_rotate_deg: float = 10.0
    jitter: float = 0.2  # brightness / contrast / saturation, images only


def _rotate_pair(image, mask, angle_deg):
    return kernels.rotate_pair(image, mask, angle_deg, IGNORE_LABEL)


def augment_sample(image, mask, rng, cfg=None):
    """Random flip/rotation applied to both image and mask, photometric
    jitter applied to the image only. Draws a fixed number of random
    values regardless of outcomes, so the stream stays aligned."""
    cfg = cfg or AugmentationConfig()
    flip = rng.random() < cfg.hflip_p
    angle = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
    brightness = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
    contrast = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
    saturation = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)

    if flip:
        image = image[:, :, ::-1].copy()
        mask = mask[:, ::-1].copy()
    if abs(angle) > 1e-12 and cfg.max_rotate_deg > 0:
        image, mask = _rotate_pair(image, mask, angle)
    image = image * np.float32(brightness)
    mean = image.mean()
    image = (image - mean) * np.float32(contrast) + mean
    grey = image.mean(axis=0, keepdims=True)
    image = grey + (image - grey) * np.float32(saturation)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"SWTR"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    model_tensors: dict
    epoch: int = 0
    val_iou: float = 0.0
    config_sha256: str = ""
    opt_step: int = 0
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)

    @classmethod
    def snapshot(cls, model, adam, epoch, val_iou, config_sha256=""):
        return cls(
            model_tensors={k: v.copy() for k, v in model.state_tensors().items()},
            epoch=epoch,
            val_iou=float(val_iou),
            config_sha256=config_sha256,
            opt_step=adam.step_count if adam else 0,
            opt_m={k: v.copy() for k, v in adam.m.items()} if adam else {},
            opt_v={k: v.copy() for k, v in adam.v.items()} if adam else {},
        )


def _flatten_checkpoint(ckpt):
    tensors = dict(ckpt.model_tensors)
    tensors["__meta__.epoch"] = np.float64(ckpt.epoch).reshape(())
    tensors["__meta__.val_iou"] = np.float64(ckpt.val_iou).reshape(())
    sha = bytes.fromhex(ckpt.config_sha256) if ckpt.config_sha256 else b""
    tensors["__meta__.config_sha256"] = np.frombuffer(sha, dtype=np.uint8).astype(np.float64)
    tensors["__opt__.step"] = np.float64(ckpt.opt_step).reshape(())
    for k, v in ckpt.opt_m.items():
        tensors[f"__opt__.m.{k}"] = v
    for k, v in ckpt.opt_v.items():
        tensors[f"__opt__.v.{k}"] = v
    return tensors


def save_checkpoint(path, ckpt):
    """Binary container: magic, version, tensor count, then per tensor a
    name, dtype tag (0=f32, 1=f64), rank, dims, and raw little-endian data."""
    tensors = _flatten_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype not in _TAG_FOR:
                arr = arr.astype(np.float32)
            tag = _TAG_FOR[arr.dtype]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype(_DTYPE_TAGS[tag]).tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointFormatError(f"unknown dtype tag {tag} for tensor {name!r}")
            dims = [
                struct.unpack("<I", _read_exact(fh, 4, f"dims of {name!r}"))[0]
                for _ in range(rank)
            ]
            nbytes = int(np.prod(dims, dtype=np.int64)) * _DTYPE_TAGS[tag].itemsize
            raw = _read_exact(fh, nbytes, f"data of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=_DTYPE_TAGS[tag]).reshape(dims).copy()
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after the last tensor")

    model_tensors = {}
    opt_m, opt_v = {}, {}
    epoch = val_iou = opt_step = 0
    sha = ""
    for name, arr in tensors.items():
        if name == "__meta__.epoch":
            epoch = int(arr)
        elif name == "__meta__.val_iou":
            val_iou = float(arr)
        elif name == "__meta__.config_sha256":
            sha = bytes(arr.astype(np.uint8)).hex()
        elif name == "__opt__.step":
            opt_step = int(arr)
        elif name.startswith("__opt__.m."):
            opt_m[name[len("__opt__.m."):]] = arr
        elif name.startswith("__opt__.v."):
            opt_v[name[len("__opt__.v."):]] = arr
        elif name.startswith("__"):
            raise CheckpointFormatError(f"unknown reserved tensor {name!r}")
        else:
            model_tensors[name] = arr
    return Checkpoint(model_tensors, epoch, val_iou, sha, opt_step, opt_m, opt_v)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    seed: int = 0
    augment: bool = True
    target_size: int = 0  # 0 means the model's declared resolution
    pretrain_epochs: int = 0  # > 0: train the internal model alone first
    freeze_resizers: bool = False
    cache_samples: bool = False  # keep decoded samples in memory across epochs
    loss: FocalLossConfig = field(default_factory=FocalLossConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_iou: float

    def format(self):
        return f"{self.epoch}\t{self.lr:.8e}\t{self.train_loss:.8e}\t{self.val_iou:.8f}"


def _trainable_params(model, cfg):
    params = []
    for name, p in model.named_parameters():
        resizer = name.startswith(("down.", "up."))
        if cfg.freeze_resizers and resizer:
            p.requires_grad = False
            continue
        params.append((name, p))
    return params


def train_loop(model, manifest, cfg, config_sha256="", epoch_hook=None):
    """Run the full protocol and return (best checkpoint, per-epoch log).

    Each epoch shuffles the train split, augments, steps Adam at the
    scheduled rate, and measures validation IoU; the checkpoint with the
    maximum validation IoU is kept. A non-finite loss or gradient halts
    training with the best checkpoint so far retained.
    """
    train_records = manifest.select("train")
    val_records = manifest.select("val")
    if not train_records or not val_records:
        raise ConfigError(
            f"need non-empty train and val splits, got {len(train_records)}/{len(val_records)}"
        )
    size = cfg.target_size or model.resolution
    if size != model.resolution:
        raise ConfigError(
            f"target size {size} does not match the variant resolution {model.resolution}"
        )
    sched = LRSchedule(cfg.lr_max, cfg.lr_min, cfg.epochs)
    adam = Adam(_trainable_params(model, cfg))
    rng = np.random.default_rng(cfg.seed)
    train_cache = val_cache = None
    if cfg.cache_samples:
        train_cache = [
            load_sample(r, manifest.class_map, target_size=size) for r in train_records
        ]
        val_cache = [
            load_sample(r, manifest.class_map, target_size=model.resolution)
            for r in val_records
        ]
    best = None
    logs = []
    for epoch in range(cfg.epochs):
        lr = float(lr_at_epoch(sched, epoch))
        pretraining = epoch < cfg.pretrain_epochs and model.variant.startswith("trainable")
        order = rng.permutation(len(train_records))
        losses = []
        halted = False
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, masks = [], []
            for i in idx:
                if train_cache is not None:
                    sample = train_cache[i]
                else:
                    sample = load_sample(train_records[i], manifest.class_map, target_size=size)
                img, msk = sample.image, sample.mask
                if cfg.augment:
                    img, msk = augment_sample(img, msk, rng, cfg.augmentation)
                if pretraining:
                    inner = model.internal.resolution
                    img = np.ascontiguousarray(
                        T.bilinear_resize(T.constant(img[None]), inner, inner).data[0]
                    )
                    msk = resize_nearest(msk, inner, inner)
                images.append(img)
                masks.append(msk)
            batch = T.Tensor(np.stack(images))
            target = np.stack(masks)
            scores = model.internal(batch) if pretraining else model(batch)
            loss = focal_loss(scores, target, cfg.loss)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                log.error("non-finite loss at epoch %d; halting with best checkpoint", epoch)
                halted = True
                break
            model.zero_grad()
            loss.backward()
            try:
                adam.step(lr)
            except NumericsError as exc:
                log.error("halting training: %s", exc)
                halted = True
                break
            losses.append(loss_value)
        if halted:
            break
        if val_cache is not None:
            report, _ = evaluate_samples(model, val_cache, cfg.batch_size)
        else:
            report, _ = evaluate_records(model, val_records, manifest.class_map, cfg.batch_size)
        entry = EpochLog(epoch, lr, float(np.mean(losses)), report.average.iou)
        logs.append(entry)
        if best is None or entry.val_iou > best.val_iou:
            best = Checkpoint.snapshot(model, adam, epoch, entry.val_iou, config_sha256)
        if epoch_hook is not None:
            epoch_hook(entry)
    if best is None:
        raise NumericsError("training halted before completing a single epoch")
    return best, logs


def config_fingerprint(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
