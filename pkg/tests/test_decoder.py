import numpy as np
import pytest

import lapseg.tensor as T
from lapseg.decoder import InternalSegmenter, NestedDecoder, decoder_node_count
from lapseg.errors import ContractError, DimensionError
from lapseg.swin import SwinEncoderConfig


def toy_pyramid(rng, levels, base_ch=8, base_hw=16, batch=2):
    return [
        T.Tensor(rng.standard_normal((batch, base_ch * 2**i, base_hw >> i, base_hw >> i)).astype(np.float32))
        for i in range(levels)
    ]


def test_node_count_for_four_levels():
    assert decoder_node_count(4) == 6
    assert decoder_node_count(2) == 1
    assert decoder_node_count(3) == 3


def test_decoder_output_shape(rng):
    dec = NestedDecoder([8, 16, 32, 64], classes=4, rng=rng, lift=4)
    pyramid = toy_pyramid(rng, 4)
    with T.no_grad():
        out = dec(pyramid)
    assert out.shape == (2, 4, 64, 64)


def test_decoder_single_class(rng):
    dec = NestedDecoder([8, 16], classes=1, rng=rng, lift=2)
    with T.no_grad():
        out = dec(toy_pyramid(rng, 2))
    assert out.shape == (2, 1, 32, 32)


def test_decoder_output_shape_independent_of_widths(rng):
    pyramid = toy_pyramid(rng, 3)
    for widths in ([8, 16, 32], [4, 4, 4], [16, 8, 4]):
        dec = NestedDecoder([8, 16, 32], classes=4, rng=rng, widths=widths, lift=4)
        with T.no_grad():
            out = dec(pyramid)
        assert out.shape == (2, 4, 64, 64)


def test_decoder_rejects_wrong_pyramid(rng):
    dec = NestedDecoder([8, 16, 32], classes=4, rng=rng)
    bad = toy_pyramid(rng, 3)
    bad[1] = T.Tensor(np.ones((2, 99, 8, 8), dtype=np.float32))
    with pytest.raises(DimensionError):
        dec(bad)


def test_every_skip_input_is_live(rng):
    # zeroing any single concatenated source changes the output
    dec = NestedDecoder([4, 8, 16], classes=3, rng=rng, lift=1)
    pyramid = toy_pyramid(rng, 3, base_ch=4, base_hw=8, batch=1)
    with T.no_grad():
        base = dec(pyramid).data
    levels = 3
    for j in range(1, levels):
        for i in range(levels - j):
            for src in range(j + 1):
                with T.no_grad():
                    ablated = dec(pyramid, drop=(i, j, src)).data
                assert np.abs(ablated - base).max() > 1e-7, f"dead input {src} of node ({i},{j})"


def make_internal(rng, resolution=56):
    cfg = SwinEncoderConfig(embed_dim=8, depths=(1, 1), heads=(1, 2))
    return InternalSegmenter(cfg, classes=4, resolution=resolution, rng=rng)


def test_internal_rejects_other_resolutions(rng):
    seg = make_internal(rng)
    with pytest.raises(ContractError):
        seg(T.Tensor(np.ones((1, 3, 112, 112), dtype=np.float32)))


def test_internal_argmax_is_valid_labels(rng):
    seg = make_internal(rng)
    x = T.Tensor(rng.standard_normal((2, 3, 56, 56)).astype(np.float32))
    with T.no_grad():
        scores = seg(x)
    labels = np.argmax(scores.data, axis=1)
    assert scores.shape == (2, 4, 56, 56)
    assert set(np.unique(labels)) <= {0, 1, 2, 3}


def test_internal_identical_inputs_identical_outputs(rng):
    seg = make_internal(rng)
    one = rng.standard_normal((1, 3, 56, 56)).astype(np.float32)
    batch = np.concatenate([one, one], axis=0)
    seg.eval()
    with T.no_grad():
        scores = seg(T.Tensor(batch))
    np.testing.assert_array_equal(scores.data[0], scores.data[1])


def test_internal_not_constant(rng):
    seg = make_internal(rng)
    x = rng.standard_normal((1, 3, 56, 56)).astype(np.float32)
    delta = rng.standard_normal((1, 3, 56, 56)).astype(np.float32) * 0.1
    with T.no_grad():
        a = seg(T.Tensor(x))
        b = seg(T.Tensor(x + delta))
    assert np.abs(a.data - b.data).max() > 0
