import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import closed_form_params, gsa_brute

from vitbis.config import ModelConfig
from vitbis.errors import BiasGridMismatch, ConfigMismatch, ShapeMismatch
from vitbis.gradcheck import grad_check
from vitbis.model import (
    DecoderStage,
    GlobalSpatialAttention,
    MultiHeadAttention,
    MultiScaleContextBlock,
    PatchEmbedding,
    TransformerBlock,
    VitbisModel,
    attention_weights,
    decode,
    decoder_stage,
    embed_patches,
    encode,
    forward,
    gsa,
    gsa_attention_map,
    msa,
    multi_scale_block,
    relative_bias,
    relative_position_index,
    split_sizes,
    tmsa,
    transformer_block,
)
from vitbis.tensor import Tensor, reduce_sum

SMALL = ModelConfig(height=16, width=16, patch_size=4, embed_dim=12, depth=1, num_heads=2, mlp_ratio=2.0, reduced_channels=16)


def attn_for(d, n, m=None, seed=0):
    cfg = ModelConfig(embed_dim=d, num_heads=n, window_size=m, rel_bias=m is not None)
    return MultiHeadAttention(np.random.default_rng(seed), cfg)


# ---------------------------------------------------------------- embedding


def test_token_count_small():
    cfg = ModelConfig(height=8, width=8, patch_size=4)
    pe = PatchEmbedding(np.random.default_rng(0), cfg)
    assert embed_patches(Tensor(np.zeros((2, 1, 8, 8))), pe).shape == (2, 4, cfg.embed_dim)


def test_token_count_reference_geometry():
    cfg = ModelConfig(height=224, width=224, patch_size=4, embed_dim=768, num_heads=12)
    pe = PatchEmbedding(np.random.default_rng(0), cfg)
    assert embed_patches(Tensor(np.zeros((1, 1, 224, 224))), pe).shape == (1, 3136, 768)


def test_zero_projection_gives_position_table():
    cfg = ModelConfig(height=8, width=8, patch_size=4, embed_dim=6, num_heads=2)
    pe = PatchEmbedding(np.random.default_rng(1), cfg)
    pe.proj.data[:] = 0.0
    out = embed_patches(Tensor(np.random.default_rng(2).standard_normal((3, 1, 8, 8))), pe).data
    assert np.array_equal(out, np.broadcast_to(pe.pos.data, out.shape))


def test_patch_order_matches_loop():
    cfg = ModelConfig(height=8, width=16, patch_size=4, embed_dim=6, num_heads=2, in_channels=2, rel_bias=False)
    pe = PatchEmbedding(np.random.default_rng(3), cfg)
    x = np.random.default_rng(4).standard_normal((1, 2, 8, 16))
    out = embed_patches(Tensor(x), pe).data[0]
    for i in range(2):
        for j in range(4):
            patch = x[0, :, 4 * i : 4 * i + 4, 4 * j : 4 * j + 4].transpose(1, 2, 0).reshape(-1)
            assert np.allclose(out[i * 4 + j], patch @ pe.proj.data + pe.pos.data[i * 4 + j], atol=1e-13)


def test_embed_indivisible():
    pe = PatchEmbedding(np.random.default_rng(0), ModelConfig(height=8, width=8))
    with pytest.raises(ShapeMismatch):
        embed_patches(Tensor(np.zeros((1, 1, 10, 10))), pe)


# -------------------------------------------------------------- multi-scale


def test_split_sizes():
    assert split_sizes(9) == (3, 3, 3)
    assert split_sizes(8) == (4, 2, 2)
    assert split_sizes(3) == (1, 1, 1)
    with pytest.raises(ShapeMismatch):
        split_sizes(2)


def test_multi_scale_identity_branch():
    m = MultiScaleContextBlock(np.random.default_rng(0), 8)
    m.conv1.weight.data = np.eye(4).reshape(4, 4, 1, 1)
    m.conv3.weight.data[:] = 0.0
    m.conv5.weight.data[:] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 8, 5, 5))
    out = multi_scale_block(Tensor(x), m).data
    assert out.shape == x.shape
    assert np.array_equal(out[:, :4], x[:, :4])
    assert np.all(out[:, 4:] == 0.0)


@settings(max_examples=25, deadline=None)
@given(c=st.integers(3, 20), h=st.integers(1, 9), w=st.integers(1, 9))
def test_multi_scale_preserves_shape(c, h, w):
    m = MultiScaleContextBlock(np.random.default_rng(c), c)
    assert multi_scale_block(Tensor(np.ones((1, c, h, w))), m).shape == (1, c, h, w)


# ---------------------------------------------------------------- attention


def test_msa_uniform_attention():
    attn = attn_for(6, 1)
    attn.w_q.data[:] = 0.0
    attn.w_k.data[:] = 0.0
    attn.w_v.data = np.eye(6)
    z = np.random.default_rng(0).standard_normal((2, 5, 6))
    out = msa(Tensor(z), attn).data
    assert np.allclose(out, np.broadcast_to(z.mean(axis=1, keepdims=True), z.shape), atol=1e-14)


def test_msa_saturated_diagonal_bias():
    attn = attn_for(8, 2, m=3)
    zero = relative_position_index(3)[0, 0]
    attn.bias_table.data[zero] = 1e4
    z = np.random.default_rng(1).standard_normal((1, 9, 8))
    out = msa(Tensor(z), attn).data
    assert np.allclose(out, z @ attn.w_v.data, atol=1e-3)


def test_attention_rows_sum_to_one():
    attn = attn_for(8, 2, m=3)
    attn.bias_table.data = np.random.default_rng(2).standard_normal(attn.bias_table.shape)
    w, _ = attention_weights(Tensor(np.random.default_rng(3).standard_normal((2, 9, 8)) * 5), attn)
    assert np.all(np.abs(w.data.sum(-1) - 1.0) <= 1e-9)


def test_msa_matches_reference_loop():
    d, n, m = 8, 2, 3
    attn = attn_for(d, n, m=m, seed=4)
    table = np.random.default_rng(5).standard_normal(attn.bias_table.shape)
    attn.bias_table.data = table
    z = np.random.default_rng(6).standard_normal((9, d))
    dh = d // n
    q, k, v = z @ attn.w_q.data, z @ attn.w_k.data, z @ attn.w_v.data
    expect = np.zeros((9, d))
    for h in range(n):
        s = slice(h * dh, (h + 1) * dh)
        for i in range(9):
            logits = np.empty(9)
            for j in range(9):
                dr = i // m - j // m + m - 1
                dc = i % m - j % m + m - 1
                logits[j] = q[i, s] @ k[j, s] / np.sqrt(dh) + table[dr * (2 * m - 1) + dc, h]
            p = np.exp(logits - logits.max())
            expect[i, s] = (p / p.sum()) @ v[:, s]
    assert np.allclose(msa(Tensor(z[None]), attn).data[0], expect, atol=1e-13)


def test_bias_grid_mismatch():
    attn = attn_for(8, 2, m=3)
    with pytest.raises(BiasGridMismatch):
        msa(Tensor(np.zeros((1, 8, 8))), attn)


def test_relative_bias_translation_invariance():
    m = 4
    attn = attn_for(8, 2, m=m)
    attn.bias_table.data = np.random.default_rng(7).standard_normal(attn.bias_table.shape)
    b = relative_bias(attn).data
    assert attn.bias_table.shape == ((2 * m - 1) ** 2, 2)
    pos = [(r, c) for r in range(m) for c in range(m)]
    checked = 0
    for qi, (qr, qc) in enumerate(pos):
        for ki, (kr, kc) in enumerate(pos):
            for sr in range(-(m - 1), m):
                for sc in range(-(m - 1), m):
                    a, bb = (qr + sr, qc + sc), (kr + sr, kc + sc)
                    if all(0 <= v < m for v in a + bb):
                        assert np.array_equal(b[:, qi, ki], b[:, a[0] * m + a[1], bb[0] * m + bb[1]])
                        checked += 1
    assert checked > 1000


def test_relative_index_is_bijective_on_offsets():
    m = 4
    idx = relative_position_index(m)
    rows, cols = np.divmod(np.arange(m * m), m)
    seen = {}
    for i in range(m * m):
        for j in range(m * m):
            off = (rows[i] - rows[j], cols[i] - cols[j])
            assert seen.setdefault(off, idx[i, j]) == idx[i, j]
    assert len(set(seen.values())) == len(seen) == (2 * m - 1) ** 2


def test_tmsa_identity_merge():
    attn = attn_for(8, 2, m=3)
    attn.w_tmsa.data = np.eye(8)
    z = Tensor(np.random.default_rng(8).standard_normal((2, 9, 8)))
    assert np.array_equal(tmsa(z, attn).data, msa(z, attn).data @ np.eye(8))
    assert np.allclose(tmsa(z, attn).data, msa(z, attn).data, atol=1e-15)


def test_tmsa_identical_heads_duplicate():
    attn = attn_for(8, 2, m=3)
    for w in (attn.w_q, attn.w_k, attn.w_v):
        w.data[:, 4:] = w.data[:, :4]
    out = msa(Tensor(np.random.default_rng(9).standard_normal((1, 9, 8))), attn).data
    assert np.array_equal(out[..., :4], out[..., 4:])


def test_tmsa_weight_grad():
    attn = attn_for(8, 2, m=3)
    z = Tensor(np.random.default_rng(10).standard_normal((1, 9, 8)))
    wt = Tensor(np.random.default_rng(11).standard_normal((1, 9, 8)))
    rep = grad_check(lambda w: reduce_sum(tmsa(z, attn) * wt), [attn.w_tmsa])
    assert rep.passed


# ------------------------------------------------------- transformer block


def test_block_residual_identity():
    cfg = ModelConfig(embed_dim=8, num_heads=2, window_size=3)
    blk = TransformerBlock(np.random.default_rng(0), cfg)
    for p in (blk.attn.w_q, blk.attn.w_k, blk.attn.w_v, blk.attn.w_tmsa, blk.fc1_w, blk.fc2_w):
        p.data[:] = 0.0
    z = np.random.default_rng(1).standard_normal((2, 9, 8))
    assert np.array_equal(transformer_block(Tensor(z), blk).data, z)


def test_stack_residual_identity_in_model():
    model = VitbisModel(SMALL, seed=0)
    for stack in model.stacks:
        for blk in stack.blocks:
            for p in (blk.attn.w_tmsa, blk.fc2_w):
                p.data[:] = 0.0
    z = Tensor(np.random.default_rng(2).standard_normal((1, 16, 12)))
    out = z
    for stack in model.stacks:
        for blk in stack.blocks:
            out = transformer_block(out, blk)
    assert np.array_equal(out.data, z.data)


@settings(max_examples=20, deadline=None)
@given(heads=st.sampled_from([1, 2, 4]), per_head=st.integers(3, 5), m=st.integers(1, 4), b=st.integers(1, 2))
def test_block_preserves_shape(heads, per_head, m, b):
    cfg = ModelConfig(embed_dim=heads * per_head, num_heads=heads, window_size=m)
    blk = TransformerBlock(np.random.default_rng(m), cfg)
    z = Tensor(np.random.default_rng(b).standard_normal((b, m * m, cfg.embed_dim)))
    assert transformer_block(z, blk).shape == z.shape


# ---------------------------------------------------------------------- GSA


@pytest.mark.parametrize("h,w,seed", [(2, 2, 0), (3, 4, 1), (4, 4, 2), (4, 3, 3), (1, 4, 4)])
def test_gsa_brute_force(h, w, seed):
    rng = np.random.default_rng(seed)
    params = GlobalSpatialAttention(rng, 16)
    feat = rng.standard_normal((2, 16, h, w))
    got = gsa(Tensor(feat), params).data
    ref = gsa_brute(feat, params)
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-12


def test_gsa_verbatim_is_value_map():
    rng = np.random.default_rng(5)
    params = GlobalSpatialAttention(rng, 8, verbatim=True)
    feat = rng.standard_normal((1, 8, 3, 3))
    got = gsa(Tensor(feat), params).data
    assert np.linalg.norm(got - gsa_brute(feat, params, verbatim=True)) / np.linalg.norm(got) < 1e-12
    assert np.allclose(got, params.value(Tensor(feat)).data, atol=1e-13)


def test_gsa_columns_normalized_and_zero_logits():
    rng = np.random.default_rng(6)
    params = GlobalSpatialAttention(rng, 8)
    feat = Tensor(rng.standard_normal((2, 8, 4, 4)) * 3)
    cols = gsa_attention_map(feat, params).data.sum(axis=1)
    assert np.all(np.abs(cols - 1.0) <= 1e-9)
    for conv in (params.query, params.key):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    assert np.allclose(gsa_attention_map(feat, params).data, 1 / 16, atol=1e-15)
    values = params.value(feat).data
    out = gsa(feat, params).data
    assert np.allclose(out, values.mean(axis=(2, 3), keepdims=True) * np.ones_like(out), atol=1e-13)


# ------------------------------------------------------------------ decoder


@pytest.mark.parametrize("mode", ["bilinear", "transposed_conv"])
def test_decoder_stage_doubles(mode):
    rng = np.random.default_rng(0)
    stage = DecoderStage(rng, 6, 4, 3, mode)
    out = decoder_stage(Tensor(rng.standard_normal((2, 6, 8, 8))), Tensor(rng.standard_normal((2, 3, 16, 16))), stage)
    assert out.shape == (2, 4, 16, 16)


def test_decoder_stage_uses_skip():
    rng = np.random.default_rng(1)
    stage = DecoderStage(rng, 6, 4, 3, "bilinear")
    prev, skip = Tensor(rng.standard_normal((1, 6, 4, 4))), rng.standard_normal((1, 3, 8, 8))
    a = decoder_stage(prev, Tensor(skip), stage).data
    b = decoder_stage(prev, Tensor(np.zeros_like(skip)), stage).data
    assert np.max(np.abs(a - b)) > 0


def test_decoder_stage_skip_mismatch():
    rng = np.random.default_rng(2)
    stage = DecoderStage(rng, 6, 4, 3, "bilinear")
    with pytest.raises(ShapeMismatch):
        decoder_stage(Tensor(np.ones((1, 6, 4, 4))), Tensor(np.ones((1, 3, 4, 4))), stage)


# -------------------------------------------------------------- full model


def test_forward_shape_reference_config():
    cfg = ModelConfig(height=32, width=32, patch_size=4, embed_dim=64, depth=2, num_heads=4, num_classes=2)
    out = forward(VitbisModel(cfg, seed=0), Tensor(np.random.default_rng(0).standard_normal((2, 1, 32, 32))))
    assert out.shape == (2, 2, 32, 32)


@pytest.mark.parametrize("mode", ["bilinear", "transposed_conv"])
def test_every_skip_is_wired(mode):
    model = VitbisModel(SMALL.replace(upsample_mode=mode), seed=1)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 16, 16)))
    bottleneck, skips = encode(model, x)
    ref = decode(model, bottleneck, skips, x).data
    assert len(skips) == SMALL.num_stacks
    for i in range(len(skips)):
        cut = list(skips)
        cut[i] = Tensor(np.zeros(skips[i].shape))
        assert np.max(np.abs(decode(model, bottleneck, cut, x).data - ref)) > 0, i


def test_modes_same_shape():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 1, 16, 16)))
    a = forward(VitbisModel(SMALL, 0), x)
    b = forward(VitbisModel(SMALL.replace(upsample_mode="transposed_conv"), 0), x)
    assert a.shape == b.shape == (1, 2, 16, 16)


def test_forward_finite_over_seeds():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 1, 16, 16)))
    for seed in range(10):
        assert np.all(np.isfinite(forward(VitbisModel(SMALL, seed), x).data))


def test_indivisible_config_rejected():
    with pytest.raises(ConfigMismatch):
        ModelConfig(height=20, width=20, patch_size=4)
    with pytest.raises(ConfigMismatch):
        ModelConfig(embed_dim=10, num_heads=4)


def test_input_shape_checked():
    with pytest.raises(ShapeMismatch):
        forward(VitbisModel(SMALL, 0), Tensor(np.zeros((1, 1, 32, 32))))


def test_parameter_count_hand_computed():
    # embed 384, encoder context 572, 3 blocks of 1334, gsa 182, reduce 208,
    # skip projections 208, decoder stages 3472 + 872 + 620, context 42, head 10
    assert VitbisModel(SMALL, 0).num_parameters() == 10572
    assert closed_form_params(SMALL) == 10572
    tc = SMALL.replace(upsample_mode="transposed_conv")
    assert VitbisModel(tc, 0).num_parameters() == 10572 + 4112 + 1032 + 260


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig(),
        ModelConfig(depth=1, embed_dim=48, num_heads=4, reduced_channels=32),
        SMALL.replace(num_classes=4, in_channels=3, mlp_ratio=3.0),
        SMALL.replace(upsample_mode="transposed_conv", reduced_channels=64),
    ],
)
def test_parameter_count_closed_form(cfg):
    assert VitbisModel(cfg, 0).num_parameters() == closed_form_params(cfg)


def test_parameter_count_independent_of_seed():
    assert VitbisModel(SMALL, 0).num_parameters() == VitbisModel(SMALL, 99).num_parameters()


def test_gradients_reach_every_parameter():
    model = VitbisModel(SMALL, seed=4)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 1, 16, 16)))
    wt = Tensor(np.random.default_rng(5).standard_normal((2, 2, 16, 16)))
    reduce_sum(forward(model, x) * wt).backward()
    dead = [name for name, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_init_is_seeded():
    a, b, c = VitbisModel(SMALL, 1), VitbisModel(SMALL, 1), VitbisModel(SMALL, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_end_to_end_grad_check():
    cfg = ModelConfig(height=16, width=16, patch_size=4, embed_dim=32, depth=1, num_heads=4, reduced_channels=16)
    model = VitbisModel(cfg, seed=5)
    rng = np.random.default_rng(5)
    for _, p in model.named_parameters():
        if not np.any(p.data):  # move zero-initialized biases off the trivial point
            p.data = rng.standard_normal(p.shape) * 0.05
    x = Tensor(rng.standard_normal((1, 1, 16, 16)))
    wt = Tensor(rng.standard_normal((1, 2, 16, 16)))
    params = model.parameters()
    rep = grad_check(
        lambda x, *ps: reduce_sum(forward(model, x) * wt), [x, *params],
        max_coords=2, rng=np.random.default_rng(0),
    )
    assert rep.max_rel_error < 1e-4, rep.max_rel_error
