import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Direct quadruple-loop cross-correlation used as the conv oracle."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    for bb in range(B):
        for co in range(Cout):
            for ho in range(Ho):
                for wo in range(Wo):
                    acc = 0.0
                    for ci in range(Cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bb, ci, ho * stride + i, wo * stride + j] * w[co, ci, i, j]
                    out[bb, co, ho, wo] = acc + (b[co] if b is not None else 0.0)
    return out
