"""Built-in invariant suite behind the ``selftest`` command.

Each check returns (name, passed, detail); the CLI prints one line per
check and exits nonzero if any fails. The suite covers gradient checks,
permutation inverses, metric oracles, schedule endpoints, the
zero-residual reduction, and checkpoint persistence.
"""

import os
import tempfile

import numpy as np

from . import tensor as T
from .metrics import ConfusionMatrix, class_metrics
from .resizers import build_resizer_pair, zero_residual_branches
from .swin import WindowAttention
from .training import (
    Checkpoint,
    FocalLossConfig,
    LRSchedule,
    focal_loss,
    load_checkpoint,
    lr_at_epoch,
    save_checkpoint,
)


def _check_conv_gradient():
    worst = 0.0
    for seed in (0, 1):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True, dtype=np.float64)
        w = T.Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True, dtype=np.float64)
        b = T.Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
        rep = T.grad_check(
            lambda a, c, d: T.conv2d(a, c, d, stride=1, padding=1), [x, w, b],
            tol=1e-5, rng=rng,
        )
        worst = max(worst, rep.max_rel_err)
    return worst < 1e-5, f"max rel err {worst:.2e} (tol 1e-5)"


def _check_attention_gradient():
    rng = np.random.default_rng(3)
    attn = WindowAttention(8, heads=2, window=3, rng=rng, dtype=np.float64)
    for p in attn.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    x = T.Tensor(rng.standard_normal((2, 9, 8)) * 0.5, requires_grad=True, dtype=np.float64)
    rep = T.grad_check(lambda t: attn(t), [x], tol=1e-4, rng=rng)
    return rep.passed, f"max rel err {rep.max_rel_err:.2e} (tol 1e-4)"


def _check_shuffle_inverse():
    rng = np.random.default_rng(5)
    for r in (2, 3, 4):
        x = T.Tensor(rng.standard_normal((2, 2 * r * r, 3, 5)).astype(np.float32))
        with T.no_grad():
            rt = T.pixel_unshuffle(T.pixel_shuffle(x, r), r)
        if not np.array_equal(rt.data, x.data):
            return False, f"roundtrip differs for r={r}"
    return True, "bitwise inverse for r in {2,3,4}"


def _check_metrics_oracle():
    rng = np.random.default_rng(7)
    n = 4
    cm = ConfusionMatrix(n)
    counts = np.zeros((n, n), dtype=np.int64)
    for _ in range(20):
        truth = rng.integers(0, n, size=(8, 8))
        truth[rng.random((8, 8)) < 0.1] = 255
        pred = rng.integers(0, n, size=(8, 8))
        cm.add(pred, truth)
        for y in range(8):
            for x in range(8):
                if truth[y, x] != 255:
                    counts[truth[y, x], pred[y, x]] += 1
    if not np.array_equal(cm.counts, counts):
        return False, "confusion counts differ from the per-pixel oracle"
    for c in range(n):
        m = class_metrics(cm, c)
        if abs(m.iou - m.f1 / (2 - m.f1)) > 1e-12:
            return False, f"IoU/F1 identity broken for class {c}"
    return True, "confusion counts exact; IoU = F1/(2-F1)"


def _check_schedule_endpoints():
    sched = LRSchedule(1e-4, 1e-6, 50)
    lr0, lr49 = lr_at_epoch(sched, 0), lr_at_epoch(sched, 49)
    ok = lr0 == 1e-4 and lr49 == 1e-6
    return ok, f"lr(0)={lr0:g}, lr(49)={lr49:g}"


def _check_zero_residual():
    rng = np.random.default_rng(9)
    down, up = build_resizer_pair("trainable", 2, channels=16, classes=3, depth=1, rng=rng)
    zero_residual_branches(down)
    zero_residual_branches(up)
    x = T.Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    s = T.Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    with T.no_grad():
        d = down(x)
        ref = T.bilinear_resize(T.bilinear_resize(x, 16, 16), 8, 8)
        u = up(s)
        refu = T.bilinear_resize(T.bilinear_resize(s, 16, 16), 32, 32)
    err = max(np.abs(d.data - ref.data).max(), np.abs(u.data - refu.data).max())
    return err < 1e-6, f"max deviation {err:.2e} (tol 1e-6)"


def _check_focal_reduces_to_ce():
    rng = np.random.default_rng(11)
    scores = T.Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    target = rng.integers(0, 4, size=(2, 5, 5))
    fl = focal_loss(scores, target, FocalLossConfig(gamma=0.0)).item()
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -np.take_along_axis(logp, target[:, None], axis=1).mean()
    return abs(fl - ce) < 1e-6, f"|focal(0) - CE| = {abs(fl - ce):.2e}"


def _check_checkpoint_roundtrip():
    rng = np.random.default_rng(13)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(7).astype(np.float64),
    }
    ckpt = Checkpoint(tensors, epoch=5, val_iou=0.75, config_sha256="ab" * 32)
    fd, path = tempfile.mkstemp(suffix=".swtr")
    os.close(fd)
    try:
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
    finally:
        os.unlink(path)
    same = all(np.array_equal(back.model_tensors[k], v) for k, v in tensors.items())
    same = same and back.epoch == 5 and back.val_iou == 0.75 and back.config_sha256 == "ab" * 32
    return same, "bitwise roundtrip incl. metadata"


CHECKS = (
    ("conv2d gradient", _check_conv_gradient),
    ("window attention gradient", _check_attention_gradient),
    ("pixel shuffle inverse", _check_shuffle_inverse),
    ("metrics oracle", _check_metrics_oracle),
    ("schedule endpoints", _check_schedule_endpoints),
    ("zero-residual reduction", _check_zero_residual),
    ("focal gamma=0 is cross-entropy", _check_focal_reduces_to_ce),
    ("checkpoint roundtrip", _check_checkpoint_roundtrip),
)


def run_all():
    results = []
    for name, fn in CHECKS:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, bool(passed), detail))
    return results
