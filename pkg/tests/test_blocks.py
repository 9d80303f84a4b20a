import numpy as np
import pytest

from ccdn import autodiff as ad
from ccdn.autodiff import Tensor
from ccdn.blocks import (CCDN, FEB, AttentionGRU, ComEB, DilatedGRU, MaskBlock, UBlock, _axis_attention,
                         cb_forward,
                         comeb_receptive_field, compensate, freq_chain, param_count, shape_table)
from ccdn.config import ComEBConfig, FebConfig, MaskBlockConfig, ModelConfig
from ccdn.layers import ShapeError, mhsa

import oracles

DESK_PARAMS = 197_821
BINS = 257


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def randomize_biases(module, rng, scale=0.1):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = rng.standard_normal(p.shape) * scale


# --- U-block / FEB ------------------------------------------------------------

def test_freq_chain_sizes():
    assert freq_chain(257, 3, 2, 5) == [257, 129, 65, 33, 17, 9]
    assert freq_chain(257, 8, 2, 5) == [257, 128, 64, 32, 16, 8]


def test_ublock_zero_in_zero_out(rng):
    u = UBlock(4, BINS, FebConfig(channels=4), rng)
    y = u(Tensor(np.zeros((1, 4, 3, BINS))))
    assert y.shape == (1, 4, 3, BINS)
    assert not y.data.any()


def test_ublock_matches_stage_by_stage_oracle(rng):
    u = UBlock(4, BINS, FebConfig(channels=4), rng)
    randomize_biases(u, rng)
    x = rng.standard_normal((1, 4, 4, BINS))
    got = u(Tensor(x)).data

    h, skips = x, []
    for conv in u.down:
        h = oracles.elu(oracles.conv_last_axis(h, conv.weight.data, conv.bias.data, stride=2, pad=1))
        skips.append(h)
    B, C, T, Fb = h.shape
    seq = h.transpose(0, 2, 1, 3).reshape(B, T, C * Fb)
    h = oracles.lstm(seq, u.lstm.w_ih.data, u.lstm.w_hh.data, u.lstm.bias.data)
    h = h.reshape(B, T, C, Fb).transpose(0, 2, 1, 3)
    for i, conv in enumerate(u.up):
        h = oracles.conv_transpose_last_axis(h + skips[-1 - i], conv.weight.data, conv.bias.data,
                                             2, 1, conv.spec.output_padding[1])
        if i < len(u.up) - 1:
            h = oracles.elu(h)
    assert got.shape == x.shape
    np.testing.assert_allclose(got, h, atol=1e-10, rtol=0)


def test_ublock_rejects_wrong_bins(rng):
    u = UBlock(2, BINS, FebConfig(channels=2), rng)
    with pytest.raises(ShapeError):
        u(Tensor(np.zeros((1, 2, 2, 129))))


def test_feb_with_zeroed_ublocks_is_glu(rng):
    feb = FEB(FebConfig(), BINS, rng)
    for u in feb.ublocks:
        zero_params(u)
    x = Tensor(rng.standard_normal((1, 2, 3, BINS)))
    np.testing.assert_array_equal(feb(x).data, feb.gated(x).data)


def test_feb_zero_in_zero_out(rng):
    feb = FEB(FebConfig(), BINS, rng)
    assert not feb(Tensor(np.zeros((1, 2, 3, BINS)))).data.any()


def test_feb_residual_identity(rng):
    feb = FEB(FebConfig(), BINS, rng)
    randomize_biases(feb, rng)
    x = Tensor(rng.standard_normal((1, 2, 5, BINS)))
    out = feb(x).data
    y = feb.gated(x)
    for i in range(len(feb.ublocks)):
        y = Tensor(y.data + feb.branch(i, y).data)
    np.testing.assert_array_equal(out, y.data)


def test_feb_gated_matches_oracle(rng):
    feb = FEB(FebConfig(channels=2), BINS, rng)
    randomize_biases(feb, rng)
    x = rng.standard_normal((1, 2, 4, 20))
    w, b = feb.glu_conv.weight.data, feb.glu_conv.bias.data
    # 3x3 same conv written out directly
    xp = np.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1)])
    z = np.zeros((1, w.shape[0], 4, 20)) + b[None, :, None, None]
    for i in range(3):
        for j in range(3):
            z += np.einsum("oc,bctf->botf", w[:, :, i, j], xp[:, :, i:i + 4, j:j + 20])
    np.testing.assert_allclose(feb.gated(Tensor(x)).data, oracles.glu(z), atol=1e-12)


# --- gated residual units -----------------------------------------------------

def test_attention_gru_zero_weights_is_identity(rng):
    unit = AttentionGRU(4, MaskBlockConfig(channels=4), rng)
    zero_params(unit)
    x = rng.standard_normal((1, 4, 3, 5))
    np.testing.assert_array_equal(unit(Tensor(x)).data, x)


def test_time_and_frequency_attention_agree_on_single_bin(rng):
    unit = AttentionGRU(4, MaskBlockConfig(channels=4), rng)
    for n in ("wq", "wk", "wv", "wo"):
        getattr(unit.attn_freq, n).data = getattr(unit.attn_time, n).data.copy()
    a = Tensor(rng.standard_normal((1, 4, 1, 1)))
    np.testing.assert_array_equal(_axis_attention(a, unit.attn_time, "time").data,
                                  _axis_attention(a, unit.attn_freq, "frequency").data)


def test_attention_gru_termwise_oracle(rng):
    cfg = MaskBlockConfig(channels=4)
    unit = AttentionGRU(4, cfg, rng)
    randomize_biases(unit, rng)
    x = rng.standard_normal((2, 4, 5, 6))
    got = unit(Tensor(x)).data

    a = oracles.glu(oracles.conv_time(x, unit.left.weight.data, unit.left.bias.data))
    B, C, T, F = a.shape
    at = unit.attn_time
    af = unit.attn_freq
    t_ctx = np.zeros_like(a)
    f_ctx = np.zeros_like(a)
    for b in range(B):
        for f in range(F):
            seq = a[b, :, :, f].T[None]
            t_ctx[b, :, :, f] = mhsa(seq, at.cfg, at.wq.data, at.wk.data, at.wv.data, at.wo.data).data[0].T
        for t in range(T):
            seq = a[b, :, t, :].T[None]
            f_ctx[b, :, t, :] = mhsa(seq, af.cfg, af.wq.data, af.wk.data, af.wv.data, af.wo.data).data[0].T
    right = np.einsum("oc,bctf->botf", unit.right.weight.data[:, :, 0, 0], t_ctx + f_ctx)
    want = x + right + unit.right.bias.data[None, :, None, None]
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_dilated_gru_zero_weights_is_identity(rng):
    unit = DilatedGRU(4, ComEBConfig(channels=4), 4, rng)
    zero_params(unit)
    x = rng.standard_normal((1, 4, 9, 3))
    np.testing.assert_array_equal(unit(Tensor(x)).data, x)


@pytest.mark.parametrize("dilation", [1, 4])
def test_dilated_gru_matches_nested_loop_oracle(rng, dilation):
    unit = DilatedGRU(4, ComEBConfig(channels=4), dilation, rng)
    randomize_biases(unit, rng)
    x = rng.standard_normal((1, 4, 12, 3))
    a = oracles.glu(oracles.conv_time(x, unit.left.weight.data, unit.left.bias.data))
    ctx = oracles.elu(oracles.conv_time(a, unit.dilated.weight.data, unit.dilated.bias.data, dilation))
    want = x + np.einsum("oc,bctf->botf", unit.right.weight.data[:, :, 0, 0], ctx) \
        + unit.right.bias.data[None, :, None, None]
    np.testing.assert_allclose(unit(Tensor(x)).data, want, atol=1e-12, rtol=0)


def test_dilation_one_context_is_plain_conv(rng):
    unit = DilatedGRU(2, ComEBConfig(channels=2), 1, rng)
    a = rng.standard_normal((1, 2, 6, 3))
    w, b = unit.dilated.weight.data, unit.dilated.bias.data
    plain = ad.conv2d(a, w, b, padding=(1, 0))
    np.testing.assert_array_equal(unit.context(Tensor(a)).data, ad.elu(plain).data)


# --- mask block / ComEB -------------------------------------------------------

@pytest.mark.parametrize("frames", [1, 3, 6])
def test_mask_block_range_and_shape(rng, frames):
    mb = MaskBlock(MaskBlockConfig(), 8, BINS, rng)
    m = mb(Tensor(rng.standard_normal((1, 8, frames, BINS)))).data
    assert m.shape == (1, frames, BINS)
    assert np.all((m > 0) & (m < 1))


def test_mask_block_saturates_with_large_output_bias(rng):
    mb = MaskBlock(MaskBlockConfig(), 8, BINS, rng)
    zero_params(mb)
    mb.out.bias.data = np.full(1, 20.0)
    m = mb(Tensor(rng.standard_normal((1, 8, 3, BINS)))).data
    assert np.all(m >= 1 - 1e-8)


def test_comeb_zero_in_zero_out(rng):
    cb = ComEB(ComEBConfig(), 8, BINS, rng)
    y = cb(Tensor(np.zeros((1, 2, 3, BINS))), Tensor(np.zeros((1, 8, 3, BINS))))
    assert y.shape == (1, 2, 3, BINS)
    assert not y.data.any()


def test_comeb_receptive_field_by_perturbation(rng):
    cfg = ComEBConfig(channels=4, groups=1, dilations=(1, 2))
    rf = comeb_receptive_field(cfg)
    assert rf == (2 + 1) + (2 + 2)
    cb = ComEB(cfg, 2, 33, rng).eval()
    T, t0 = 2 * rf + 6, rf + 2
    x = rng.standard_normal((1, 2, T, 33))
    g = rng.standard_normal((1, 2, T, 33))
    base = cb(Tensor(x), Tensor(g)).data[0, :, t0]
    reach = []
    for t in range(T):
        xp = x.copy()
        xp[:, :, t] += 1.0
        y = cb(Tensor(xp), Tensor(g)).data[0, :, t0]
        if np.max(np.abs(y - base)) > 1e-10:
            reach.append(t - t0)
    assert reach == list(range(-rf, rf + 1))


def test_desk_comeb_receptive_field():
    assert comeb_receptive_field(ComEBConfig()) == 4 * sum(2 + d for d in (1, 2, 4, 8, 16))


# --- compensation -------------------------------------------------------------

def test_compensation_passthrough_and_doubling(rng):
    ri = rng.standard_normal((4, 7, 2))
    zero = cb_forward(ri, np.zeros((4, 7)))
    np.testing.assert_array_equal(zero.r_n.data, ri[..., 0])
    np.testing.assert_array_equal(zero.i_n.data, ri[..., 1])
    one = cb_forward(ri, np.ones((4, 7)))
    np.testing.assert_array_equal(one.r_n.data, 2 * ri[..., 0])
    np.testing.assert_array_equal(one.i_n.data, 2 * ri[..., 1])


def test_compensation_worked_example():
    c = compensate(3.0, 4.0, 0.5)
    for got, want in ((c.mag, 5.0), (c.smag, 2.5), (c.comp_r, 1.5), (c.comp_i, 2.0),
                      (c.r_n, 4.5), (c.i_n, 6.0)):
        assert abs(float(got.data) - want) <= 1e-12
    assert np.cos(c.theta.data) == pytest.approx(0.6, abs=1e-15)


def test_compensation_components_follow_phase(rng):
    r, i = rng.standard_normal((2, 50))
    m = rng.uniform(0, 1, 50)
    c = compensate(r, i, m)
    np.testing.assert_allclose(np.hypot(c.comp_r.data, c.comp_i.data), c.smag.data, atol=1e-9)
    np.testing.assert_allclose(c.comp_r.data, c.smag.data * np.cos(c.theta.data), atol=1e-12)
    np.testing.assert_allclose(c.comp_i.data, c.smag.data * np.sin(c.theta.data), atol=1e-12)


def test_compensation_at_origin():
    c = compensate(0.0, 0.0, 0.7)
    assert float(c.theta.data) == 0.0 and float(c.r_n.data) == 0.0 and float(c.i_n.data) == 0.0


def test_compensation_shape_mismatch():
    with pytest.raises(ShapeError):
        compensate(np.zeros(3), np.zeros(3), np.zeros(2))


# --- full model ---------------------------------------------------------------

def test_model_output_shape(rng):
    model = CCDN(ModelConfig(), rng)
    x = rng.standard_normal((4, BINS, 2))
    assert model(x).shape == x.shape
    assert model(x[None]).shape == (1,) + x.shape


def test_model_with_zero_mask_returns_complex_path(rng):
    model = CCDN(ModelConfig(), rng)
    model.mb.forward = lambda g: Tensor(np.zeros((g.shape[0], g.shape[2], g.shape[3])))
    d = model.details(rng.standard_normal((3, BINS, 2)))
    np.testing.assert_array_equal(d["output"].data[0], d["complex"].data[0].transpose(1, 2, 0))


def test_model_is_composition_of_blocks(rng):
    model = CCDN(ModelConfig(), rng).eval()
    randomize_biases(model, rng, 0.05)
    spec = rng.standard_normal((3, BINS, 2))
    out = model(spec).data
    x = Tensor(spec.transpose(2, 0, 1)[None])
    g = model.feb(x)
    mask = model.mb(g).data[0]
    ri = model.comeb(x, g).data[0]
    r, i = ri[0], ri[1]
    np.testing.assert_array_equal(out[..., 0], r + mask * r)
    np.testing.assert_array_equal(out[..., 1], i + mask * i)


def test_batched_forward_matches_single_in_eval_mode(rng):
    model = CCDN(ModelConfig(), rng).eval()
    specs = rng.standard_normal((2, 3, BINS, 2))
    both = model(specs).data
    for b in range(2):
        np.testing.assert_allclose(both[b], model(specs[b]).data, atol=1e-12)


def test_model_rejects_bad_input(rng):
    model = CCDN(ModelConfig(), rng)
    with pytest.raises(ShapeError):
        model(np.zeros((3, 100, 2)))
    with pytest.raises(ShapeError):
        model(np.zeros((3, BINS)))


def test_desk_parameter_count_is_stable(rng):
    assert param_count(ModelConfig()) == DESK_PARAMS
    assert sum(p.size for p in CCDN(ModelConfig(), rng).parameters()) == DESK_PARAMS


def test_large_preset_parameter_count():
    n = param_count(ModelConfig.paper())
    assert n > 5e7
    assert n == sum(size for _, _, size in shape_table(ModelConfig.paper()))


def test_shape_table_names_are_unique():
    names = [n for n, _, _ in shape_table(ModelConfig())]
    assert len(names) == len(set(names))
    assert any(n.startswith("mb.units.9.") for n in names)
    assert any(n.startswith("comeb.units.19.") for n in names)
