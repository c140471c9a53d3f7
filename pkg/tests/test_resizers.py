import numpy as np
import pytest

import lapseg.tensor as T
from lapseg.errors import ConfigError, ContractError, DimensionError
from lapseg.resizers import (
    PyramidDownsampler,
    PyramidUpsampler,
    SubpixelBlock,
    UniformResizer,
    build_resizer_pair,
    uniform_resize,
    zero_residual_branches,
)


def randomize(module, rng, scale=0.2):
    for _, p in module.named_parameters():
        p.data[...] = rng.standard_normal(p.shape).astype(p.dtype) * scale


def cascade_bilinear(x, levels, direction):
    with T.no_grad():
        for _ in range(levels):
            _, _, h, w = x.shape
            x = T.bilinear_resize(x, h // 2, w // 2) if direction == "down" else \
                T.bilinear_resize(x, h * 2, w * 2)
    return x


@pytest.mark.parametrize("k,size", [(1, 448), (1, 64), (2, 896), (2, 32)])
def test_downsampler_shape_contract(rng, k, size):
    net = PyramidDownsampler(k, channels=8, depth=1, rng=rng)
    x = T.Tensor(rng.standard_normal((1, 3, size, size)).astype(np.float32))
    with T.no_grad():
        out = net(x)
    assert out.shape == (1, 3, size // 2**k, size // 2**k)


@pytest.mark.parametrize("k", [1, 2])
def test_upsampler_shape_contract(rng, k):
    net = PyramidUpsampler(k, classes=4, channels=8, depth=1, rng=rng)
    x = T.Tensor(rng.standard_normal((2, 4, 16, 16)).astype(np.float32))
    with T.no_grad():
        out = net(x)
    assert out.shape == (2, 4, 16 * 2**k, 16 * 2**k)


def test_downsampler_rejects_indivisible_extents(rng):
    net = PyramidDownsampler(2, channels=8, depth=1, rng=rng)
    with pytest.raises(DimensionError):
        net(T.Tensor(np.ones((1, 3, 66, 64), dtype=np.float32)))


def test_fresh_network_starts_at_bilinear(rng):
    # zero-initialized residual heads make a new network equal its base path
    net = PyramidDownsampler(2, channels=8, depth=1, rng=rng)
    x = T.Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
    with T.no_grad():
        out = net(x)
    ref = cascade_bilinear(x, 2, "down")
    np.testing.assert_allclose(out.data, ref.data, atol=1e-6)


def test_zero_residual_reduction_down(rng):
    net = PyramidDownsampler(2, channels=8, depth=2, rng=rng)
    randomize(net, rng)
    zero_residual_branches(net)
    x = T.Tensor(rng.standard_normal((2, 3, 48, 48)).astype(np.float32))
    with T.no_grad():
        out = net(x)
    ref = cascade_bilinear(x, 2, "down")
    np.testing.assert_allclose(out.data, ref.data, atol=1e-6)


def test_zero_residual_reduction_up(rng):
    net = PyramidUpsampler(2, classes=5, channels=8, depth=2, rng=rng)
    randomize(net, rng)
    zero_residual_branches(net)
    x = T.Tensor(rng.standard_normal((1, 5, 12, 12)).astype(np.float32))
    with T.no_grad():
        out = net(x)
    ref = cascade_bilinear(x, 2, "up")
    np.testing.assert_allclose(out.data, ref.data, atol=1e-6)


def test_constant_scores_stay_constant_with_zero_residuals(rng):
    net = PyramidUpsampler(1, classes=3, channels=8, depth=1, rng=rng)
    x = T.Tensor(np.tile(np.array([1.0, -2.0, 0.5], dtype=np.float32).reshape(1, 3, 1, 1), (1, 1, 8, 8)))
    with T.no_grad():
        out = net(x)
    for c, v in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_allclose(out.data[0, c], v, atol=1e-6)


@pytest.mark.parametrize("cls", [PyramidDownsampler, PyramidUpsampler])
def test_gradients_reach_every_parameter(rng, cls):
    if cls is PyramidDownsampler:
        net = cls(1, channels=8, depth=2, rng=rng)
        x = T.Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32), requires_grad=True)
    else:
        net = cls(1, classes=4, channels=8, depth=2, rng=rng)
        x = T.Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32), requires_grad=True)
    randomize(net, rng)
    loss = T.sum_(T.mul(net(x), net(x)))
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, f"zero gradient for {name}"


def test_cascade_consistency_shapes(rng):
    two = PyramidDownsampler(2, channels=8, depth=1, rng=rng)
    one_a = PyramidDownsampler(1, channels=8, depth=1, rng=rng)
    one_b = PyramidDownsampler(1, channels=8, depth=1, rng=rng)
    x = T.Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    with T.no_grad():
        direct = two(x)
        chained = one_b(one_a(x))
    assert direct.shape == chained.shape


def test_uniform_resizer_matches_zero_residual(rng):
    down = UniformResizer(2, "down")
    net = PyramidDownsampler(2, channels=8, depth=1, rng=rng)
    zero_residual_branches(net)
    x = T.Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    with T.no_grad():
        assert np.array_equal(down(x).data, net(x).data)


def test_uniform_resize_identity_and_quarter(rng):
    x = T.Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    assert np.array_equal(uniform_resize(x, 1).data, x.data)
    big = T.Tensor(rng.standard_normal((1, 3, 896, 896)).astype(np.float32))
    assert uniform_resize(big, 0.25).shape == (1, 3, 224, 224)


def test_uniform_resize_halving_matches_four_pixel_average():
    # half-pixel downsample by 2 averages each 2x2 block exactly
    ramp = np.arange(36, dtype=np.float64).reshape(1, 1, 6, 6)
    out = uniform_resize(T.Tensor(ramp, dtype=np.float64), 0.5)
    blocks = ramp.reshape(1, 1, 3, 2, 3, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out.data, blocks, atol=1e-12)


def test_uniform_resize_rejects_non_integral():
    x = T.Tensor(np.ones((1, 3, 9, 9), dtype=np.float32))
    with pytest.raises(ContractError):
        uniform_resize(x, 0.5)


def test_build_pair_none_forces_identity(rng):
    down, up = build_resizer_pair("none", 2, classes=4, rng=rng)
    x = T.Tensor(rng.standard_normal((1, 3, 10, 10)).astype(np.float32))
    assert down(x) is x and up(x) is x


def test_build_pair_trainable_independent_params(rng):
    down, up = build_resizer_pair("trainable", 2, channels=8, classes=4, depth=1, rng=rng)
    dp = {n for n, _ in down.named_parameters()}
    up_params = list(up.named_parameters())
    assert dp and up_params
    down_objs = {id(p) for _, p in down.named_parameters()}
    assert all(id(p) not in down_objs for _, p in up_params)


@pytest.mark.parametrize("kind,k", [("trainable", 0), ("trainable", 3), ("uniform", 0), ("bogus", 1)])
def test_build_pair_rejects_bad_requests(rng, kind, k):
    with pytest.raises(ConfigError):
        build_resizer_pair(kind, k, rng=rng)


def test_subpixel_block_needs_divisible_channels(rng):
    with pytest.raises(ConfigError):
        SubpixelBlock(3, channels=10, depth=1, rng=rng)
