import numpy as np
import pytest

from lapseg import kernels
from lapseg.errors import ConfigError, DimensionError

from conftest import conv2d_oracle

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1), (3, 1, 3)])
def test_forward_matches_oracle(backend, rng, stride, padding, k):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = kernels.conv2d_forward(x, w, b, stride, padding)
    ref = conv2d_oracle(x, w, b, stride, padding)
    assert got.shape == ref.shape
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_forward_matches_oracle_larger(backend, rng):
    x = rng.standard_normal((4, 8, 16, 16))
    w = rng.standard_normal((5, 8, 3, 3))
    got = kernels.conv2d_forward(x, w, None, 1, 1)
    ref = conv2d_oracle(x, w, None, 1, 1)
    rel = np.abs(got - ref).max() / np.abs(ref).max()
    assert rel < 1e-5


def test_gradients_match_loop_oracles(backend, rng):
    # dL/dw[o,c,i,j] and dL/dx from first principles on a tiny instance
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((2, 3, 5, 5))
    gw = kernels.conv2d_weight_grad(g, x, w.shape, 1, 1)
    gx = kernels.conv2d_input_grad(g, w, x.shape, 1, 1)

    eps = 1e-6
    for index in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 0, 2, 1)]:
        wp = w.copy()
        wp[index] += eps
        wm = w.copy()
        wm[index] -= eps
        num = ((conv2d_oracle(x, wp, None, 1, 1) - conv2d_oracle(x, wm, None, 1, 1)) * g).sum() / (2 * eps)
        assert abs(gw[index] - num) < 1e-6
    for index in [(0, 0, 0, 0), (1, 1, 3, 4), (0, 1, 2, 2)]:
        xp = x.copy()
        xp[index] += eps
        xm = x.copy()
        xm[index] -= eps
        num = ((conv2d_oracle(xp, w, None, 1, 1) - conv2d_oracle(xm, w, None, 1, 1)) * g).sum() / (2 * eps)
        assert abs(gx[index] - num) < 1e-6


@pytest.mark.skipif(len(BACKENDS) < 2, reason="numba unavailable")
@pytest.mark.parametrize("shape,k,stride", [((2, 5, 12, 12), 3, 1), ((2, 5, 12, 12), 3, 2), ((1, 3, 9, 9), 5, 1)])
def test_backends_agree(rng, shape, k, stride):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((4, shape[1], k, k))
    g_shape = kernels.conv_out_extent(shape[2], k, stride, 1)
    g = rng.standard_normal((shape[0], 4, g_shape, kernels.conv_out_extent(shape[3], k, stride, 1)))
    results = {}
    for name in BACKENDS:
        kernels.set_backend(name)
        results[name] = (
            kernels.conv2d_forward(x, w, None, stride, 1),
            kernels.conv2d_input_grad(g, w, x.shape, stride, 1),
            kernels.conv2d_weight_grad(g, x, w.shape, stride, 1),
        )
    for a, b in zip(results["numba"], results["numpy"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_forward_deterministic(backend, rng):
    x = rng.standard_normal((2, 4, 10, 10)).astype(np.float32)
    w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
    a = kernels.conv2d_forward(x, w, None, 1, 1)
    b = kernels.conv2d_forward(x, w, None, 1, 1)
    assert np.array_equal(a, b)


def test_dtype_preserved(backend, rng):
    for dtype in (np.float32, np.float64):
        x = rng.standard_normal((1, 2, 6, 6)).astype(dtype)
        w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
        assert kernels.conv2d_forward(x, w, None, 1, 1).dtype == dtype


def test_validation_errors(backend, rng):
    x = rng.standard_normal((1, 3, 8, 8))
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x, rng.standard_normal((4, 2, 3, 3)), None, 1, 1)
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x, rng.standard_normal((4, 3, 2, 2)), None, 1, 1)
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x, rng.standard_normal((4, 3, 3, 3)), None, 0, 1)
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x.astype(np.float32), rng.standard_normal((4, 3, 3, 3)), None, 1, 1)


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        kernels.set_backend("cuda")


def test_perturbation_hook(backend, rng):
    g = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    clean = kernels.conv2d_input_grad(g, w, (1, 2, 4, 4), 1, 1)
    kernels.CONV_INPUT_GRAD_NUDGE = 0.5
    try:
        nudged = kernels.conv2d_input_grad(g, w, (1, 2, 4, 4), 1, 1)
    finally:
        kernels.CONV_INPUT_GRAD_NUDGE = 0.0
    assert nudged[0, 0, 0, 0] == pytest.approx(clean[0, 0, 0, 0] + 0.5)
