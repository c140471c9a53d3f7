"""Benchmark the numba kernels against the pure-numpy fallback.

Times the three convolution kernels (forward, input gradient, weight
gradient) on shapes representative of the segmentation models, plus one
full forward/backward training step per backend.

    python bench/bench_kernels.py [--repeats N]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lapseg import kernels  # noqa: E402
import lapseg.tensor as T  # noqa: E402
from lapseg.model import PyramidSegmenter  # noqa: E402
from lapseg.swin import SwinEncoderConfig  # noqa: E402
from lapseg.training import FocalLossConfig, focal_loss  # noqa: E402

SHAPES = [
    # (B, Cin, Cout, H): resizer stacks, heads, and decoder nodes
    (8, 12, 16, 224),
    (8, 16, 3, 224),
    (8, 4, 4, 448),
    (8, 48, 16, 56),
    (8, 80, 16, 56),
    (8, 96, 32, 28),
    (8, 192, 64, 14),
]


def timeit(fn, *args, repeats=3):
    fn(*args)
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def bench_convs(repeats):
    rows = []
    for (B, Cin, Cout, H) in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.random((B, Cin, H, H), dtype=np.float32)
        w = rng.random((Cout, Cin, 3, 3), dtype=np.float32)
        g = rng.random((B, Cout, H, H), dtype=np.float32)
        gflop = 2 * B * Cout * H * H * Cin * 9 / 1e9
        row = {"shape": f"B{B} {Cin}->{Cout} @{H}", "gflop": gflop}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            row[backend] = (
                timeit(kernels.conv2d_forward, x, w, None, 1, 1, repeats=repeats),
                timeit(kernels.conv2d_input_grad, g, w, x.shape, 1, 1, repeats=repeats),
                timeit(kernels.conv2d_weight_grad, g, x, w.shape, 1, 1, repeats=repeats),
            )
        rows.append(row)
    return rows


def bench_step(repeats):
    cfg = SwinEncoderConfig(embed_dim=16, depths=(1, 1, 1, 1), heads=(1, 2, 4, 8))
    results = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        model = PyramidSegmenter("trainable_2x", classes=4, encoder_cfg=cfg,
                                 resizer_channels=16, resizer_depth=1, seed=0)
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.random((4, 3, 448, 448), dtype=np.float32))
        target = rng.integers(0, 4, size=(4, 448, 448))

        def step():
            loss = focal_loss(model(x), target, FocalLossConfig())
            model.zero_grad()
            loss.backward()

        results[backend] = timeit(step, repeats=repeats)
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    backends = kernels.available_backends()
    if "numba" not in backends:
        print("numba not importable; benchmarking the numpy fallback only")

    print(f"{'conv shape':>20} {'GFLOP':>6}", end="")
    for backend in backends:
        print(f"  {backend + ' f/i/w (ms)':>26}", end="")
    print()
    for row in bench_convs(args.repeats):
        print(f"{row['shape']:>20} {row['gflop']:>6.2f}", end="")
        for backend in backends:
            f, i, w = row[backend]
            print(f"  {f * 1e3:>8.1f}/{i * 1e3:>7.1f}/{w * 1e3:>7.1f}", end="")
        print()

    print("\nfull trainable_2x training step (batch 4 at 448):")
    for backend, dt in bench_step(args.repeats).items():
        print(f"  {backend:<6} {dt:.2f} s")


if __name__ == "__main__":
    main()
