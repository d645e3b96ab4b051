import math
from dataclasses import replace

import numpy as np
import pytest

from vitsim import blockmat as bm
from vitsim import staticprune as sp
from vitsim import tokenprune as tp
from vitsim import vitref
from vitsim.errors import InvalidArgument

from oracles import dense_encoder, dense_msa, dense_weights, ln


def toy_cfg(**kw):
    base = dict(depth=2, num_heads=2, embed_dim=8, head_dim=4, mlp_dim=16, image_size=8, patch_size=4,
                in_chans=2, num_classes=5, block_size=4, tdm_layers=(2,), use_bias=True)
    base.update(kw)
    return vitref.ModelConfig(**base)


def test_config_defaults_and_validation():
    c = vitref.deit_small()
    assert (c.depth, c.num_heads, c.embed_dim, c.head_dim, c.mlp_dim, c.num_tokens) == (12, 6, 384, 64, 1536, 197)
    assert c.tdm_layers == (3, 7, 10)
    assert vitref.ModelConfig(image_size=32, patch_size=16).num_tokens == 5
    with pytest.raises(InvalidArgument):
        vitref.ModelConfig(embed_dim=100)
    with pytest.raises(InvalidArgument):
        vitref.ModelConfig(keep_rate=0)
    with pytest.raises(InvalidArgument):
        vitref.ModelConfig(tdm_layers=(13,))
    with pytest.raises(InvalidArgument):
        vitref.ModelConfig.from_json({"depth": 2, "bogus": 1})
    c2 = vitref.ModelConfig.from_json(c.to_json())
    assert c2 == c


def test_keep_rate_for():
    c = vitref.deit_small(keep_rate=0.7, keep_rate_overrides={7: 0.5})
    assert c.keep_rate_for(1) is None
    assert c.keep_rate_for(3) == 0.7 and c.keep_rate_for(7) == 0.5


def test_embed_zero_image():
    cfg = toy_cfg()
    m = vitref.random_model(cfg, 0)
    m = replace(m, embedding=replace(m.embedding, patch_proj=np.zeros_like(m.embedding.patch_proj),
                                     patch_bias=np.zeros(cfg.embed_dim)))
    z = vitref.embed(np.zeros((8, 8, 2)), m)
    expect = m.embedding.pos_embed.copy()
    expect[0] += m.embedding.cls_token
    np.testing.assert_array_equal(z, expect)


def test_embed_one_hot_patch():
    cfg = toy_cfg(embed_dim=32, num_heads=1, head_dim=32, block_size=4)
    m = vitref.random_model(cfg, 0)
    eye = np.eye(cfg.patch_dim, cfg.embed_dim)
    m = replace(m, embedding=replace(m.embedding, patch_proj=eye, patch_bias=np.zeros(32)))
    x = np.zeros((8, 8, 2))
    x[4, 1, 1] = 1.0  # patch (1, 0), pixel row 0, col 1, channel 1
    z = vitref.embed(x, m)
    flat_idx = (0 * 4 + 1) * 2 + 1
    expect = m.embedding.pos_embed[3].copy()
    expect[flat_idx] += 1.0
    np.testing.assert_array_equal(z[3], expect)
    with pytest.raises(InvalidArgument):
        vitref.embed(np.zeros((8, 8, 3)), m)


def test_layernorm_cases():
    g, b = np.ones(2), np.zeros(2)
    np.testing.assert_allclose(vitref.layernorm([[1.0, -1.0]], g, b), [[1 / math.sqrt(1 + 1e-6), -1 / math.sqrt(1 + 1e-6)]])
    np.testing.assert_array_equal(vitref.layernorm([[3.0, 3.0]], g, np.array([0.5, -2.0])), [[0.5, -2.0]])
    z = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(vitref.layernorm(z + 7.0, np.ones(5), np.zeros(5)),
                               vitref.layernorm(z, np.ones(5), np.zeros(5)), atol=1e-12)


def test_gelu():
    assert vitref.gelu(0.0) == 0.0
    assert vitref.gelu(10.0) == pytest.approx(10.0)
    assert vitref.gelu(1.0) == pytest.approx(0.8413447460685429)


def test_softmax_rows():
    a = vitref.softmax_rows(np.random.default_rng(0).normal(size=(7, 7)) * 30, 0.5)
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-9)
    assert (a >= 0).all() and (a <= 1).all()


def test_msa_single_token():
    cfg = toy_cfg()
    enc = vitref.random_model(cfg, 1).encoders[0]
    z = np.random.default_rng(0).normal(size=(1, 8))
    res = vitref.msa_forward(z, enc)
    w = dense_weights(enc)
    v = z @ w["wv"] + w["bv"]
    np.testing.assert_allclose(res.out, v @ w["wproj"] + w["b_proj"], rtol=1e-12)
    assert all(a.tolist() == [[1.0]] for a in res.attention.values())


def test_msa_zero_weights():
    cfg = toy_cfg(use_bias=False)
    enc = vitref.random_model(cfg, 1).encoders[0]
    zero = lambda w: bm.sparse_from_array(np.zeros(w.shape), w.b)  # noqa: E731
    enc = replace(enc, wq=zero(enc.wq), wk=zero(enc.wk), wv=zero(enc.wv), wproj=zero(enc.wproj))
    assert not vitref.msa_forward(np.ones((3, 8)), enc).out.any()


def test_msa_matches_dense_oracle():
    cfg = toy_cfg()
    enc = vitref.random_model(cfg, 2).encoders[0]
    z = np.random.default_rng(3).normal(size=(3, 8))
    res = vitref.msa_forward(z, enc)
    want, maps = dense_msa(z, dense_weights(enc), [0, 1])
    np.testing.assert_allclose(res.out, want, rtol=1e-9, atol=1e-12)
    for h in (0, 1):
        np.testing.assert_allclose(res.attention[h], maps[h], rtol=1e-9)
    with pytest.raises(InvalidArgument):
        vitref.msa_forward(np.zeros((3, 7)), enc)


def test_mlp_matches_dense_oracle():
    cfg = toy_cfg()
    enc = vitref.random_model(cfg, 4).encoders[0]
    z = np.random.default_rng(5).normal(size=(6, 8))
    w = dense_weights(enc)
    h = z @ w["w_int"] + w["b_int"]
    h = 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    np.testing.assert_allclose(vitref.mlp_forward(z, enc), h @ w["w_out"] + w["b_out"], rtol=1e-9, atol=1e-12)
    enc0 = replace(enc, b_int=np.zeros(16), b_out=np.zeros(8))
    assert not vitref.mlp_forward(np.zeros((2, 8)), enc0).any()
    with pytest.raises(InvalidArgument):
        vitref.mlp_forward(np.zeros((2, 4)), enc)


def test_encoder_rate_one_equals_plain():
    cfg = toy_cfg()
    enc = vitref.random_model(cfg, 6).encoders[0]
    z = np.random.default_rng(7).normal(size=(5, 8))
    a, tr = vitref.encoder_forward(z, enc, 1.0)
    b, _ = vitref.encoder_forward(z, enc, None)
    np.testing.assert_array_equal(a, b)
    assert tr.routing is None


def test_encoder_zero_gains_is_identity():
    cfg = toy_cfg(use_bias=False)
    enc = vitref.random_model(cfg, 6).encoders[0]
    enc = replace(enc, ln1_gain=np.zeros(8), ln2_gain=np.zeros(8))
    z = np.random.default_rng(7).normal(size=(5, 8))
    np.testing.assert_array_equal(vitref.encoder_forward(z, enc)[0], z)


def test_encoder_token_drop_matches_oracle():
    cfg = toy_cfg()
    enc = vitref.random_model(cfg, 8).encoders[0]
    z = np.random.default_rng(9).normal(size=(9, 8))

    def keep(z1, maps):
        s = np.mean([maps[h][0] for h in sorted(maps)], axis=0)
        order = sorted(range(1, 9), key=lambda i: (-s[i], i))
        k = math.ceil(8 * 0.5)
        kept, dropped = order[:k], order[k:]
        w = s[dropped] / s[dropped].sum()
        return np.vstack([z1[[0] + kept], (w @ z1[dropped])[None]])

    out, tr = vitref.encoder_forward(z, enc, 0.5)
    assert out.shape[0] == tp.tokens_after(9, 0.5) == 6
    np.testing.assert_allclose(out, dense_encoder(z, enc, [0, 1], keep), rtol=1e-9, atol=1e-12)
    assert tr.n_in == 9 and tr.n_out == 6


def test_model_forward_dense_oracle_and_determinism(tiny_cfg):
    cfg = replace(tiny_cfg, keep_rate=0.6, use_bias=True)
    model = vitref.random_model(cfg, 3)
    x = np.random.default_rng(4).normal(size=(32, 32, 3))
    res = vitref.run_model(x, model)
    assert res.token_counts == tp.token_trajectory(17, 2, (2,), 0.6)
    np.testing.assert_array_equal(vitref.model_forward(x, model), res.logits)

    # dense oracle: TDM on the second encoder replays the reference routing
    z = vitref.embed(x, model)
    z = dense_encoder(z, model.encoders[0], [0, 1])

    def keep(z1, maps):
        s = np.mean([maps[h][0] for h in sorted(maps)], axis=0)
        n = len(s)
        order = sorted(range(1, n), key=lambda i: (-s[i], i))
        k = math.ceil(round((n - 1) * 0.6, 9))
        kept, dropped = order[:k], order[k:]
        w = s[dropped] / s[dropped].sum()
        return np.vstack([z1[[0] + kept], (w @ z1[dropped])[None]])

    z = dense_encoder(z, model.encoders[1], [0, 1], keep)
    e = model.embedding
    logits = ln(z[:1], e.norm_gain, e.norm_bias)[0] @ e.head + e.head_bias
    np.testing.assert_allclose(res.logits, logits, rtol=1e-8, atol=1e-12)


def test_identity_pruning_bit_exact(tiny_model, tiny_scores, tiny_image):
    pruned, _ = sp.prune_model(tiny_model, tiny_scores, 1.0)
    pruned = vitref.with_keep_rate(pruned, 1.0)
    np.testing.assert_array_equal(vitref.model_forward(tiny_image, pruned),
                                  vitref.model_forward(tiny_image, tiny_model))


def test_pruned_equals_masked_dense(tiny_pruned, tiny_image):
    pruned, _ = tiny_pruned
    z = vitref.embed(tiny_image, pruned)
    for enc in pruned.encoders:
        want = dense_encoder(z, enc, enc.live_heads())
        got, _ = vitref.encoder_forward(z, enc)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)
        z = got


def test_removing_empty_head_changes_nothing(tiny_pruned, tiny_image):
    pruned, masks = tiny_pruned
    j = next(i for i, m in enumerate(masks) if m.removed_heads)
    h = masks[j].removed_heads[0]
    enc = pruned.encoders[j]
    per = enc.head_blocks()
    # refill the dead head's W_q/W_k/W_v columns: it stays dead because W_proj rows are empty
    rng = np.random.default_rng(0)
    refill = {}
    for key in ("wq", "wk", "wv"):
        w = getattr(enc, key)
        g = w.mask().grid.copy()
        g[:, h * per:(h + 1) * per] = True
        dense = bm.decompress(w).to_array()
        dense[:, h * enc.head_dim:(h + 1) * enc.head_dim] = rng.normal(size=(enc.embed_dim, enc.head_dim))
        refill[key] = bm.sparse_from_array(dense, enc.b, g)
    other = replace(enc, **refill)
    assert h not in other.live_heads()
    m2 = replace(pruned, encoders=tuple(other if i == j else e for i, e in enumerate(pruned.encoders)))
    np.testing.assert_array_equal(vitref.model_forward(tiny_image, m2), vitref.model_forward(tiny_image, pruned))


def test_random_model_seeded(tiny_cfg):
    a, b = vitref.random_model(tiny_cfg, 5), vitref.random_model(tiny_cfg, 5)
    assert a.encoders[1].wq == b.encoders[1].wq
    assert np.abs(a.encoders[0].w_int.to_array()).max() <= 0.02
    assert not a.encoders[0].bq.any()
