import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pef import autodiff as ad
from pef.autodiff import ShapeError, Tensor
from pef.blocks import (LPI, XCA, Attention, DecoderLayer, EncoderLayer, GridShape, Init,
                        cross_attention, decoder_layer, encoder_layer,
                        local_patch_interaction, self_attention, xca)
from pef.gradcheck import check_blocks

from oracles import scalar_attention


def init(seed=0):
    return Init(np.random.default_rng(seed), np.float64)


def set_identity(attn, d):
    for lin in (attn.q, attn.k, attn.v, attn.out):
        lin.weight.data[...] = np.eye(d)
        lin.bias.data[...] = 0.0


def test_single_token_attention_returns_projected_value():
    attn = Attention(4, 2, init())
    x = np.random.default_rng(1).standard_normal((1, 4))
    out = self_attention(Tensor(x), attn).data
    v = x @ attn.v.weight.data + attn.v.bias.data
    np.testing.assert_allclose(out, v @ attn.out.weight.data + attn.out.bias.data, atol=1e-12)


def test_two_token_hand_evaluation():
    attn = Attention(2, 1, init())
    set_identity(attn, 2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, w = attn(Tensor(x[None]), Tensor(x[None]), Tensor(x[None]), return_weights=True)
    s = 1 / math.sqrt(2)
    a0 = math.exp(s) / (math.exp(s) + 1.0)
    np.testing.assert_allclose(w.data[0, 0, 0], [a0, 1 - a0], atol=1e-15)
    np.testing.assert_allclose(out.data[0], [[a0, 1 - a0], [1 - a0, a0]], atol=1e-15)


def test_attention_matches_scalar_loops():
    rng = np.random.default_rng(2)
    attn = Attention(6, 3, init(2))
    for lin in (attn.q, attn.k, attn.v, attn.out):
        lin.bias.data[...] = 0.0
    x = rng.standard_normal((5, 6))
    ref = scalar_attention(x, attn.q.weight.data, attn.k.weight.data, attn.v.weight.data,
                           attn.out.weight.data, heads=3)
    np.testing.assert_allclose(self_attention(Tensor(x), attn).data, ref, atol=1e-12)


@pytest.mark.parametrize("block", ["attention", "xca"])
def test_token_permutation_equivariance(block):
    rng = np.random.default_rng(3)
    layer = Attention(8, 2, init()) if block == "attention" else XCA(8, 2, init())
    fn = (lambda t: self_attention(t, layer)) if block == "attention" else (lambda t: xca(t, layer))
    x = rng.standard_normal((7, 8))
    perm = rng.permutation(7)
    a = fn(Tensor(x[perm])).data
    b = fn(Tensor(x)).data[perm]
    assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(b))


def test_cross_attention_single_memory_token():
    attn = Attention(4, 2, init())
    rng = np.random.default_rng(4)
    mem = rng.standard_normal((1, 4))
    out = cross_attention(Tensor(rng.standard_normal((3, 4))), Tensor(mem), attn).data
    v = (mem @ attn.v.weight.data + attn.v.bias.data) @ attn.out.weight.data + attn.out.bias.data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-12)


def test_cross_attention_shape_and_memory_permutation():
    attn = Attention(4, 2, init())
    rng = np.random.default_rng(5)
    q = Tensor(rng.standard_normal((3, 4)))
    mem = rng.standard_normal((5, 4))
    out = cross_attention(q, Tensor(mem), attn).data
    assert out.shape == (3, 4)
    shuffled = cross_attention(q, Tensor(mem[rng.permutation(5)]), attn).data
    np.testing.assert_allclose(shuffled, out, rtol=1e-5, atol=1e-12)


def test_xca_single_channel_map_is_one():
    layer = XCA(1, 1, init())
    x = np.random.default_rng(6).standard_normal((9, 1))
    out, w = layer(Tensor(x[None]), return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((1, 1, 1, 1)))
    v = x @ layer.v.weight.data + layer.v.bias.data
    np.testing.assert_allclose(out.data[0], v @ layer.out.weight.data + layer.out.bias.data, atol=1e-12)


def test_xca_map_shape_independent_of_tokens():
    layer = XCA(8, 2, init())
    rng = np.random.default_rng(7)
    shapes = {layer(Tensor(rng.standard_normal((1, n, 8))), return_weights=True)[1].shape
              for n in (4, 8, 16, 32)}
    assert shapes == {(1, 2, 4, 4)}


def test_xca_temperature_stays_positive():
    layer = XCA(8, 2, init())
    layer.log_temperature.data[...] = -50.0
    assert np.all(np.exp(layer.log_temperature.data) > 0)


def test_xca_zero_column_is_finite():
    layer = XCA(4, 1, init())
    for lin in (layer.q, layer.k):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0
    out = layer(Tensor(np.ones((1, 3, 4))))
    assert np.all(np.isfinite(out.data))


def test_lpi_zero_in_zero_out():
    lpi = LPI(4, init())
    out = local_patch_interaction(Tensor(np.zeros((6, 4))), GridShape(2, 3), lpi).data
    np.testing.assert_array_equal(out, 0.0)


def test_lpi_single_cell_uses_center_taps():
    lpi = LPI(3, init())
    rng = np.random.default_rng(8)
    lpi.bias1.data[...] = rng.standard_normal(3)
    lpi.bias2.data[...] = rng.standard_normal(3)
    x = rng.standard_normal((1, 3))
    out = local_patch_interaction(Tensor(x), GridShape(1, 1), lpi).data
    h = lpi.conv1.data[1, 1] * x[0] + lpi.bias1.data
    gelu = h * 0.5 * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    np.testing.assert_allclose(out[0], lpi.conv2.data[1, 1] * gelu + lpi.bias2.data, atol=1e-12)


def test_lpi_shift_equivariance_in_interior():
    lpi = LPI(2, init())
    rows, cols = 5, 8
    rng = np.random.default_rng(9)
    grid = np.zeros((rows, cols, 2))
    grid[1:4, 2:5] = rng.standard_normal((3, 3, 2))
    shifted = np.roll(grid, 1, axis=1)
    g = GridShape(rows, cols)
    a = local_patch_interaction(Tensor(grid.reshape(-1, 2)), g, lpi).data.reshape(rows, cols, 2)
    b = local_patch_interaction(Tensor(shifted.reshape(-1, 2)), g, lpi).data.reshape(rows, cols, 2)
    # two 3x3 convs reach 2 cells; columns 2..6 of the shifted output stay clear of the border
    np.testing.assert_allclose(b[:, 3:7], a[:, 2:6], atol=1e-12)


def test_lpi_rejects_wrong_token_count():
    with pytest.raises(ShapeError):
        local_patch_interaction(Tensor(np.zeros((5, 4))), GridShape(2, 3), LPI(4, init()))


@pytest.mark.parametrize("variant", ["token", "channel"])
def test_zeroed_residual_branches_give_identity(variant):
    layer = EncoderLayer(8, 2, init(), variant)
    layer.attn.out.weight.data[...] = 0.0
    layer.attn.out.bias.data[...] = 0.0
    layer.mlp.layers[-1].weight.data[...] = 0.0
    layer.mlp.layers[-1].bias.data[...] = 0.0
    if variant == "channel":
        layer.lpi.conv2.data[...] = 0.0
    x = np.random.default_rng(10).standard_normal((7, 8))
    out = encoder_layer(Tensor(x), layer, GridShape(2, 3)).data
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("variant", ["token", "channel"])
def test_encoder_layer_preserves_shape(variant):
    layer = EncoderLayer(8, 2, init(), variant)
    out = layer(Tensor(np.random.default_rng(0).standard_normal((2, 13, 8))), GridShape(3, 4))
    assert out.shape == (2, 13, 8)


def test_channel_layer_leaves_cls_out_of_lpi():
    layer = EncoderLayer(8, 2, init(), "channel")
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 7, 8))
    base = layer(Tensor(x), GridShape(2, 3)).data
    layer.lpi.conv2.data[...] += 1.0
    changed = layer(Tensor(x), GridShape(2, 3)).data
    np.testing.assert_array_equal(changed[:, 0], base[:, 0])
    assert not np.allclose(changed[:, 1:], base[:, 1:])


def test_decoder_single_query_self_attention_weight_is_one():
    layer = DecoderLayer(8, 2, init())
    h = Tensor(np.random.default_rng(12).standard_normal((1, 1, 8)))
    _, w = layer.self_attn(h, h, h, return_weights=True)
    np.testing.assert_array_equal(w.data, 1.0)


def test_decoder_output_count_independent_of_memory():
    layer = DecoderLayer(8, 2, init())
    rng = np.random.default_rng(13)
    q = Tensor(rng.standard_normal((3, 8)))
    qpos = Tensor(rng.standard_normal((3, 8)))
    for n in (1, 4, 17):
        out = decoder_layer(q, Tensor(rng.standard_normal((n, 8))), layer, qpos)
        assert out.shape == (3, 8)


def test_decoder_memory_pos_changes_keys_only():
    layer = DecoderLayer(8, 2, init())
    rng = np.random.default_rng(14)
    q, qpos = Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((3, 8)))
    mem = Tensor(rng.standard_normal((1, 5, 8)))
    zero = Tensor(np.zeros((1, 5, 8)))
    np.testing.assert_array_equal(layer(q, mem, qpos, zero).data, layer(q, mem, qpos, None).data)
    assert not np.allclose(layer(q, mem, qpos, Tensor(rng.standard_normal((1, 5, 8)))).data,
                           layer(q, mem, qpos).data)


def test_attention_output_is_convex_combination_of_values():
    attn = Attention(6, 2, init())
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((1, 9, 6)))
    _, w = attn(x, x, x, return_weights=True)
    v = ad.transpose(ad.reshape(attn.v(x), (1, 9, 2, 3)), (0, 2, 1, 3)).data
    mixed = w.data @ v
    lo, hi = v.min(axis=2, keepdims=True), v.max(axis=2, keepdims=True)
    assert np.all(mixed >= lo - 1e-6) and np.all(mixed <= hi + 1e-6)


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        Attention(6, 4, init())


def test_all_blocks_pass_gradcheck():
    for rep in check_blocks(seed=1):
        assert rep.passed, str(rep)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 32), st.sampled_from([8, 16, 32]), st.integers(1, 5), st.booleans())
def test_layers_preserve_shape(n, d, m, channel):
    init_ = init(n)
    heads = 2
    x = Tensor(np.random.default_rng(n).standard_normal((n + 1, d)))
    layer = EncoderLayer(d, heads, init_, "channel" if channel else "token", mlp_ratio=2)
    assert layer(x, GridShape(1, n)).shape == (n + 1, d)
    dec = DecoderLayer(d, heads, init_, mlp_ratio=2)
    q = Tensor(np.zeros((m, d)))
    assert dec(q, x, Tensor(np.ones((m, d)))).shape == (m, d)
