import numpy as np
import pytest

import lapseg.tensor as T
from lapseg.errors import ConfigError, DimensionError
from lapseg.swin import (
    MASK_NEG,
    SwinEncoder,
    SwinEncoderConfig,
    WindowAttention,
    relative_position_index,
    shifted_window_mask,
    window_partition,
    window_reverse,
)


def adjacency_mask_oracle(h, w, window, shift):
    """Brute force: two tokens of one shifted window may attend iff both
    their row and column fragments wrapped the same way under the roll.

    Token at rolled position r came from original position (r + shift) mod
    extent; the window's preimage is contiguous exactly for tokens whose
    coordinates did not wrap, so pairs with differing wrap flags per axis
    are excluded.
    """
    nwh, nww = h // window, w // window
    masks = []
    for wy in range(nwh):
        for wx in range(nww):
            rows = np.arange(wy * window, (wy + 1) * window)
            cols = np.arange(wx * window, (wx + 1) * window)
            wrap_h = (rows + shift) >= h
            wrap_w = (cols + shift) >= w
            tokens = [(ry, rx) for ry in range(window) for rx in range(window)]
            m = np.zeros((window * window, window * window), dtype=bool)
            for a, (ay, ax) in enumerate(tokens):
                for b, (by, bx) in enumerate(tokens):
                    m[a, b] = wrap_h[ay] != wrap_h[by] or wrap_w[ax] != wrap_w[bx]
            masks.append(m)
    return np.stack(masks)


def dense_attention_oracle(x, attn):
    """Straightforward dense attention with the module's own parameters."""
    Bn, L, C = x.shape
    h = attn.heads
    hd = C // h
    qkv = x @ attn.qkv.weight.data + attn.qkv.bias.data
    qkv = qkv.reshape(Bn, L, 3, h, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q * hd**-0.5) @ k.transpose(0, 1, 3, 2)
    bias = attn.bias_table.data[relative_position_index(attn.window).reshape(-1)]
    logits = logits + bias.reshape(L, L, h).transpose(2, 0, 1)[None]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(Bn, L, C)
    return out @ attn.proj.weight.data + attn.proj.bias.data


def test_partition_single_window_no_mask(rng):
    x = T.Tensor(rng.standard_normal((2, 4, 4, 3)).astype(np.float32))
    windows, mask = window_partition(x, 4, shift=0)
    assert windows.shape == (2, 16, 3)
    assert mask is None


def test_partition_reverse_identity(rng):
    x = T.Tensor(rng.standard_normal((2, 8, 8, 5)).astype(np.float32))
    for shift in (0, 2):
        windows, _ = window_partition(x, 4, shift=shift)
        back = window_reverse(windows, 4, 8, 8, shift=shift)
        assert np.array_equal(back.data, x.data)


def test_partition_rejects_indivisible(rng):
    with pytest.raises(DimensionError):
        window_partition(T.Tensor(np.ones((1, 6, 8, 2), dtype=np.float32)), 4)


def test_shifted_mask_matches_wrap_oracle_small():
    # M=2 on a 4x4 grid with shift 1: boundary windows carry masked pairs
    mask = shifted_window_mask(4, 4, 2, 1)
    oracle = adjacency_mask_oracle(4, 4, 2, 1)
    np.testing.assert_array_equal(mask < 0, oracle)
    touching = [1, 2, 3]  # windows on the wrap boundary, row-major order
    for idx in touching:
        assert (mask[idx] < 0).any()
    assert not (mask[0] < 0).any()


@pytest.mark.parametrize("h,w,window,shift", [(8, 8, 4, 2), (8, 8, 2, 1), (8, 16, 4, 2), (6, 6, 3, 1)])
def test_shifted_mask_matches_wrap_oracle(h, w, window, shift):
    mask = shifted_window_mask(h, w, window, shift)
    oracle = adjacency_mask_oracle(h, w, window, shift)
    np.testing.assert_array_equal(mask < 0, oracle)
    assert set(np.unique(mask)) <= {0.0, MASK_NEG}


def test_masked_pairs_get_exactly_zero_weight(rng):
    logits = rng.standard_normal((4, 16, 16)).astype(np.float32)
    mask = shifted_window_mask(8, 8, 4, 2)
    probs = T.softmax(T.Tensor(logits + mask.astype(np.float32)), axis=-1)
    assert (probs.data[mask < 0] == 0.0).all()
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_token_window_returns_projected_value(rng):
    attn = WindowAttention(6, heads=2, window=1, rng=rng)
    x = rng.standard_normal((3, 1, 6)).astype(np.float32)
    out = attn(T.Tensor(x))
    qkv = x @ attn.qkv.weight.data + attn.qkv.bias.data
    v = qkv[:, :, 12:]
    expected = v @ attn.proj.weight.data + attn.proj.bias.data
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_window_attention_matches_dense_oracle(rng):
    attn = WindowAttention(8, heads=2, window=4, rng=rng)
    attn.bias_table.data[...] = rng.standard_normal(attn.bias_table.shape) * 0.1
    x = rng.standard_normal((2, 16, 8)).astype(np.float32)
    with T.no_grad():
        out = attn(T.Tensor(x))
    ref = dense_attention_oracle(x.astype(np.float64), attn)
    assert np.abs(out.data - ref).max() < 1e-5


def test_encoder_pyramid_shapes(rng):
    cfg = SwinEncoderConfig(embed_dim=32, depths=(1, 1, 1, 1), heads=(1, 2, 4, 8))
    enc = SwinEncoder(cfg, rng)
    x = T.Tensor(rng.standard_normal((2, 3, 224, 224)).astype(np.float32))
    with T.no_grad():
        pyramid = enc(x)
    shapes = [p.shape for p in pyramid]
    assert shapes == [(2, 32, 56, 56), (2, 64, 28, 28), (2, 128, 14, 14), (2, 256, 7, 7)]


def test_encoder_channel_halving_law(rng):
    cfg = SwinEncoderConfig(embed_dim=8, depths=(1, 1), heads=(1, 2))
    enc = SwinEncoder(cfg, rng)
    x = T.Tensor(rng.standard_normal((1, 3, 56, 56)).astype(np.float32))
    with T.no_grad():
        pyramid = enc(x)
    for i in range(1, len(pyramid)):
        assert pyramid[i].shape[1] == 2 * pyramid[i - 1].shape[1]
        assert pyramid[i].shape[2] * 2 == pyramid[i - 1].shape[2]


def test_encoder_no_cross_batch_mixing(rng):
    cfg = SwinEncoderConfig(embed_dim=8, depths=(1, 1), heads=(1, 2))
    enc = SwinEncoder(cfg, rng)
    x = rng.standard_normal((3, 3, 56, 56)).astype(np.float32)
    perm = np.array([2, 0, 1])
    with T.no_grad():
        base = enc(T.Tensor(x))
        shuffled = enc(T.Tensor(x[perm]))
    for level in range(len(base)):
        np.testing.assert_array_equal(shuffled[level].data, base[level].data[perm])


def test_encoder_gradients_reach_every_parameter(rng):
    for seed in (0, 1, 2):
        gen = np.random.default_rng(seed)
        cfg = SwinEncoderConfig(embed_dim=8, depths=(2, 1), heads=(1, 2))
        enc = SwinEncoder(cfg, gen)
        for _, p in enc.named_parameters():
            if np.all(p.data == 0):
                p.data[...] = gen.standard_normal(p.shape).astype(np.float32) * 0.02
        x = T.Tensor(gen.standard_normal((2, 3, 56, 56)).astype(np.float32))
        pyramid = enc(x)
        loss = T.sum_(T.mul(pyramid[-1], pyramid[-1]))
        for level in pyramid[:-1]:
            loss = T.add(loss, T.sum_(T.mul(level, level)))
        loss.backward()
        for name, p in enc.named_parameters():
            assert p.grad is not None and np.abs(p.grad).max() > 0, f"seed {seed}: {name}"


def test_encoder_validates_geometry(rng):
    cfg = SwinEncoderConfig(embed_dim=8, depths=(1, 1, 1, 1), heads=(1, 2, 4, 8))
    enc = SwinEncoder(cfg, rng)
    with pytest.raises(ConfigError):
        enc(T.Tensor(np.ones((1, 3, 100, 100), dtype=np.float32)))
    with pytest.raises(ConfigError):
        SwinEncoderConfig(embed_dim=8, depths=(1,), heads=(1,))
    with pytest.raises(ConfigError):
        SwinEncoderConfig(embed_dim=6, depths=(1, 1), heads=(4, 4))


def test_alternating_shift_pattern(rng):
    cfg = SwinEncoderConfig(embed_dim=8, depths=(2, 2), heads=(1, 2))
    enc = SwinEncoder(cfg, rng)
    for blocks in enc.stages:
        assert blocks[0].shift == 0
        assert blocks[1].shift == cfg.window // 2
