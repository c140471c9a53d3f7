"""Command-line entry points.

Commands: train, eval, infer, resize-compare, selftest, synth-data.
Run configuration is a line-oriented ``key = value`` file; unknown keys
are rejected with their line number, every key has a documented default,
and the fully resolved configuration is echoed into the output directory
so any run can be reproduced from its own echo.

Exit codes: 0 success, 1 validation/configuration errors, 2 internal
check failures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .data import ClassMap, DatasetManifest, DEFAULT_CLASS_NAMES, synth_dataset_generate
from .errors import ConfigError, LapsegError
from .metrics import evaluate_records, format_report, predict_labels
from .model import PyramidSegmenter, VARIANTS
from .resample import resize_bilinear
from .resizers import UniformResizer
from .selftest import run_all
from .swin import SwinEncoderConfig
from .training import (
    AugmentationConfig,
    FocalLossConfig,
    TrainConfig,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

PALETTE = np.array(
    [
        (0, 0, 0),
        (220, 50, 47),
        (133, 153, 0),
        (38, 139, 210),
        (211, 54, 130),
        (42, 161, 152),
    ],
    dtype=np.uint8,
)


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s):
    s = s.strip()
    return tuple(int(x) for x in s.split(",")) if s else ()


def _parse_float_list(s):
    s = s.strip()
    return tuple(float(x) for x in s.split(",")) if s else ()


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default, help)
CONFIG_SCHEMA = {
    "model.variant": (str, "trainable_2x", f"one of {sorted(VARIANTS)}"),
    "model.classes": (int, 4, "number of segmentation classes"),
    "model.resizer_channels": (int, 32, "working channels of the resizer conv stacks"),
    "model.resizer_depth": (int, 2, "conv-bn-relu units per resizer block"),
    "model.embed_dim": (int, 32, "encoder embedding channels"),
    "model.depths": (_parse_int_list, (2, 2, 2, 2), "attention blocks per encoder stage"),
    "model.heads": (_parse_int_list, (1, 2, 4, 8), "attention heads per encoder stage"),
    "model.window": (int, 7, "attention window size"),
    "model.patch": (int, 4, "patch embedding size"),
    "model.decoder_channels": (_parse_int_list, (), "decoder widths; empty mirrors the encoder"),
    "train.epochs": (int, 50, "training epochs"),
    "train.batch_size": (int, 8, "mini-batch size"),
    "train.lr_max": (float, 1e-4, "schedule maximum learning rate"),
    "train.lr_min": (float, 1e-6, "schedule minimum learning rate"),
    "train.focal_gamma": (float, 2.0, "focal loss focusing exponent"),
    "train.focal_alpha": (_parse_float_list, (), "per-class loss weights; empty is uniform"),
    "train.seed": (int, 0, "seed for init, shuffling, and augmentation"),
    "train.augment": (_parse_bool, True, "enable training augmentation"),
    "train.pretrain_epochs": (int, 0, "epochs of internal-only pretraining at 224"),
    "train.freeze_resizers": (_parse_bool, False, "exclude resizer parameters from training"),
    "data.manifest": (str, "", "path to the dataset manifest"),
    "data.target_size": (int, 0, "square resize applied at load; 0 uses the model resolution"),
    "output.dir": (str, "", "run output directory"),
}


def parse_config(path):
    cfg = {k: default for k, (_, default, _) in CONFIG_SCHEMA.items()}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser = CONFIG_SCHEMA[key][0]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def effective_config_text(cfg):
    lines = [f"{key} = {_fmt(cfg[key])}" for key in CONFIG_SCHEMA]
    return "\n".join(lines) + "\n"


def build_model(cfg, dtype=np.float32):
    encoder = SwinEncoderConfig(
        embed_dim=cfg["model.embed_dim"],
        depths=cfg["model.depths"],
        heads=cfg["model.heads"],
        window=cfg["model.window"],
        patch=cfg["model.patch"],
    )
    widths = cfg["model.decoder_channels"] or None
    return PyramidSegmenter(
        cfg["model.variant"],
        classes=cfg["model.classes"],
        encoder_cfg=encoder,
        resizer_channels=cfg["model.resizer_channels"],
        resizer_depth=cfg["model.resizer_depth"],
        decoder_widths=widths,
        seed=cfg["train.seed"],
        dtype=dtype,
    )


def train_config(cfg):
    alpha = cfg["train.focal_alpha"] or None
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr_max=cfg["train.lr_max"],
        lr_min=cfg["train.lr_min"],
        seed=cfg["train.seed"],
        augment=cfg["train.augment"],
        target_size=cfg["data.target_size"],
        pretrain_epochs=cfg["train.pretrain_epochs"],
        freeze_resizers=cfg["train.freeze_resizers"],
        loss=FocalLossConfig(gamma=cfg["train.focal_gamma"], alpha=alpha),
        augmentation=AugmentationConfig(),
    )


def _class_map(cfg):
    n = cfg["model.classes"]
    names = list(DEFAULT_CLASS_NAMES[:n])
    while len(names) < n:
        names.append(f"class{len(names)}")
    return ClassMap(tuple(names))


def ensure_outdir(path, force):
    path = Path(path)
    if not str(path):
        raise ConfigError("output.dir is required")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _colorize(labels):
    return PALETTE[labels % len(PALETTE)]


def _save_image(path, array01):
    arr = np.clip(array01 * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _load_rgb(path, size):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise LapsegError(f"unreadable image {path}: {exc}") from exc
    arr = arr.transpose(2, 0, 1)
    return resize_bilinear(arr, size, size).astype(np.float32)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = parse_config(args.config)
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is required for training")
    manifest = DatasetManifest.load(cfg["data.manifest"], class_map=_class_map(cfg))
    out_dir = ensure_outdir(args.out or cfg["output.dir"], args.force)
    cfg["output.dir"] = str(out_dir)
    effective = effective_config_text(cfg)
    (out_dir / "config.effective").write_text(effective, encoding="utf-8")
    sha = config_fingerprint(effective)

    model = build_model(cfg)
    log_lines = []

    def hook(entry):
        log_lines.append(entry.format())
        print(entry.format())

    best, logs = train_loop(model, manifest, train_config(cfg), config_sha256=sha,
                            epoch_hook=hook)
    (out_dir / "train_log.tsv").write_text("\n".join(e.format() for e in logs) + "\n",
                                           encoding="utf-8")
    save_checkpoint(out_dir / "checkpoint.swtr", best)

    model.load_state_tensors(best.model_tensors)
    report, _ = evaluate_records(model, manifest.select("val"), manifest.class_map,
                                 cfg["train.batch_size"])
    (out_dir / "best_metrics.txt").write_text(
        format_report(report, manifest.class_map.names), encoding="utf-8"
    )
    print(f"best epoch {best.epoch} val_iou {best.val_iou:.6f} -> {out_dir}")
    return 0


def cmd_eval(args):
    cfg = parse_config(args.config)
    manifest_path = args.manifest or cfg["data.manifest"]
    if not manifest_path:
        raise ConfigError("pass --manifest or set data.manifest")
    manifest = DatasetManifest.load(manifest_path, class_map=_class_map(cfg))
    records = manifest.select(args.split)
    if not records:
        raise ConfigError(f"split {args.split!r} is empty")
    model = build_model(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    model.load_state_tensors(ckpt.model_tensors)
    report, _ = evaluate_records(model, records, manifest.class_map, args.batch_size)
    text = format_report(report, manifest.class_map.names)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_infer(args):
    cfg = parse_config(args.config)
    model = build_model(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    model.load_state_tensors(ckpt.model_tensors)
    out_dir = ensure_outdir(args.out, args.force)
    image = _load_rgb(args.image, model.resolution)
    model.eval()
    with T.no_grad():
        scores = model(T.Tensor(image[None]))
    labels = predict_labels(scores.data)[0]
    Image.fromarray(labels.astype(np.uint8), mode="L").save(out_dir / "mask.png")
    color = _colorize(labels).astype(np.float32) / 255.0
    overlay = 0.5 * image + 0.5 * color.transpose(2, 0, 1)
    _save_image(out_dir / "overlay.png", overlay)
    print(f"wrote {out_dir}/mask.png and {out_dir}/overlay.png")
    return 0


RESIZE_COMPARE_FILES = (
    "input_full.png",
    "input_down_bilinear.png",
    "input_down_trained.png",
    "mask_internal.png",
    "mask_up_bilinear.png",
    "mask_up_trained.png",
)


def cmd_resize_compare(args):
    cfg = parse_config(args.config)
    if not cfg["model.variant"].startswith("trainable"):
        raise ConfigError("resize-compare needs a trainable-resizer variant checkpoint")
    model = build_model(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    model.load_state_tensors(ckpt.model_tensors)
    out_dir = ensure_outdir(args.out_dir, args.force)
    levels = model.down.levels

    image = _load_rgb(args.image, model.resolution)
    model.eval()
    uniform_down = UniformResizer(levels, "down")
    uniform_up = UniformResizer(levels, "up")
    with T.no_grad():
        x = T.Tensor(image[None])
        down_trained = model.down(x)
        down_bilinear = uniform_down(x)
        scores = model.internal(down_trained)
        up_trained = model.up(scores)
        up_bilinear = uniform_up(scores)

    _save_image(out_dir / "input_full.png", image)
    _save_image(out_dir / "input_down_bilinear.png", np.clip(down_bilinear.data[0], 0, 1))
    _save_image(out_dir / "input_down_trained.png", np.clip(down_trained.data[0], 0, 1))
    for name, sc in (
        ("mask_internal.png", scores),
        ("mask_up_bilinear.png", up_bilinear),
        ("mask_up_trained.png", up_trained),
    ):
        labels = predict_labels(sc.data)[0]
        Image.fromarray(_colorize(labels), mode="RGB").save(out_dir / name)
    print(f"wrote {len(RESIZE_COMPARE_FILES)} files to {out_dir}")
    return 0


def cmd_selftest(_args):
    results = run_all()
    failed = 0
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        failed += not passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 2 if failed else 0


def cmd_synth_data(args):
    split_counts = None
    if args.train or args.val or args.test:
        split_counts = {"train": args.train, "val": args.val, "test": args.test}
        count = sum(split_counts.values())
    else:
        count = args.count
    manifest = synth_dataset_generate(
        args.out, count, args.size, classes=args.classes, seed=args.seed,
        style=args.style, split_counts=split_counts,
    )
    print(f"generated {count} samples ({manifest.counts()}) under {args.out}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="lapseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="", help="override output.dir")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default="")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", required=True, help="report file to write")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("resize-compare", help="emit trained-vs-bilinear resizer imagery")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_resize_compare)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--size", type=int, default=448)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", default="shapes", choices=("shapes", "bars"))
    p.add_argument("--train", type=int, default=0)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LapsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
