"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import itertools
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from vitsim import accelsim as acc
from vitsim import blockmat as bm
from vitsim import cli, perfmodel as pm, staticprune as sp, tokenprune as tp, vitref


# -- 1: sparse/dense oracle equivalence ---------------------------------------

def test_criterion_01_sparse_dense_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for i in range(200):
        b = [4, 16, 32][i % 3]
        m, k, n = rng.integers(1, 9, size=3)
        xa = rng.normal(size=(m * b, k * b))
        wa = rng.normal(size=(k * b, n * b))
        mask = rng.random((k, n)) < rng.uniform(0.1, 1.0)
        w = bm.sparse_from_array(wa, b, mask)
        x = bm.partition_dense(xa, b)
        hw = acc.HardwareConfig(p_h=int(rng.integers(1, 5)), p_t=int(rng.integers(1, 13)),
                                p_c=int(rng.integers(1, 4)), p_pe=8, b=b)
        ref = bm.sbmm_ref(x, w).to_array()
        sim, _ = acc.simulate_sbmm(x, w, hw, group_width=int(rng.integers(1, n + 1)) * b)
        wm = wa.copy()
        for r, c in zip(*np.nonzero(~mask)):
            wm[r * b:(r + 1) * b, c * b:(c + 1) * b] = 0
        dense = xa @ wm
        scale = max(np.abs(dense).max(), 1.0)
        assert np.abs(ref - dense).max() / scale <= 1e-6
        np.testing.assert_array_equal(sim.to_array(), ref)
        # matched accumulation order: header order, one block product at a time
        ordered = np.zeros_like(dense)
        for c in range(n):
            for r in range(k):
                if mask[r, c]:
                    ordered[:, c * b:(c + 1) * b] += xa[:, r * b:(r + 1) * b] @ wa[r * b:(r + 1) * b, c * b:(c + 1) * b]
        np.testing.assert_array_equal(ref, ordered)
    assert time.perf_counter() - start < 10.0


# -- 2: cycle-model exactness ----------------------------------------------------

def _uniform_sparse(rng, rows_b, cols_b, per_col, b):
    mask = np.zeros((rows_b, cols_b), dtype=bool)
    for c in range(cols_b):
        mask[rng.choice(rows_b, per_col, replace=False), c] = True
    return bm.sparse_from_array(rng.normal(size=(rows_b * b, cols_b * b)), b, mask)


def test_criterion_02_cycle_model_exactness():
    rng = np.random.default_rng(7)
    hw = acc.HardwareConfig(p_h=4, p_t=12, p_c=2, p_pe=8, b=16)
    x = bm.partition_dense(rng.normal(size=(64, 64)), 16)
    _, st = acc.simulate_sbmm(x, _uniform_sparse(rng, 4, 4, 4, 16), hw, group_width=64)
    assert st.cycles == pm.cycles_sbmm(64, 64, 64, 64, 16, 1, hw) == 256

    combos = 0
    grid = itertools.product([4, 8, 16], [1, 2, 4], [1, 3, 12], [1, 2], [2, 8])
    for b, p_h, p_t, p_c, p_pe in grid:
        hw = acc.HardwareConfig(p_h=p_h, p_t=p_t, p_c=p_c, p_pe=p_pe, b=b)
        m1_b = int(rng.integers(1, 15))
        m2_b = int(rng.integers(1, 7))
        per = p_c * int(rng.integers(1, 3))  # columns per group, a multiple of p_c
        heads = int(rng.integers(1, 6))
        keep = int(rng.integers(1, m2_b + 1))
        phi = Fraction(keep, m2_b)
        m1, m2, dh, d = m1_b * b, m2_b * b, per * b, heads * per * b
        x = bm.partition_dense(rng.normal(size=(m1, m2)), b)
        w = _uniform_sparse(rng, m2_b, heads * per, keep, b)
        y, st = acc.simulate_sbmm(x, w, hw, group_width=dh)
        assert st.cycles == pm.cycles_sbmm(m1, m2, d, dh, b, phi, hw), (b, p_h, p_t, p_c, p_pe)
        assert y == bm.sbmm_ref(x, w)
        wd = bm.partition_dense(rng.normal(size=(m2, d)), b)
        _, st = acc.simulate_dbmm(x, wd, hw, group_width=dh)
        assert st.cycles == pm.cycles_sbmm(m1, m2, d, dh, b, 1, hw)
        xs = [bm.partition_dense(rng.normal(size=(m1, m2)), b) for _ in range(heads)]
        ws = [bm.partition_dense(rng.normal(size=(m2, dh)), b) for _ in range(heads)]
        _, st = acc.simulate_dhbmm(xs, ws, hw)
        assert st.cycles == pm.cycles_dhbmm(m1, m2, dh, heads, b, hw)
        combos += 3
    assert combos >= 100


# -- 3: baseline complexity ------------------------------------------------------

def test_criterion_03_baseline_complexity(tmp_path):
    import json

    start = time.perf_counter()
    out = tmp_path / "model.json"
    assert cli.main(["model", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - start
    rep = json.loads(out.read_text())
    cfg = rep["config"]
    assert (cfg["depth"], cfg["num_heads"], cfg["embed_dim"], cfg["head_dim"], cfg["mlp_dim"]) == (12, 6, 384, 64, 1536)
    total = rep["baseline"]["total"]
    assert abs(total - 4.27e9) / 4.27e9 <= 0.10
    assert elapsed < 1.0


# -- 4: pruned-complexity internal oracle --------------------------------------------

def test_criterion_04_pruned_complexity_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        heads = int(rng.integers(2, 5))
        b = int(rng.choice([4, 8]))
        dh = b * int(rng.integers(1, 3))
        cfg = vitref.ModelConfig(depth=3, num_heads=heads, embed_dim=heads * dh, head_dim=dh,
                                 mlp_dim=int(rng.integers(2, 9)) * b + int(rng.integers(0, b)),
                                 image_size=16, patch_size=4, in_chans=1, num_classes=3, block_size=b,
                                 tdm_layers=(2, 3), keep_rate=float(rng.choice([0.5, 0.7, 0.9])))
        model = vitref.random_model(cfg, seed)
        scores = vitref.random_scores(cfg, seed + 100, head_spread=1.0)
        r_b = float(rng.choice([0.3, 0.5, 0.7]))
        pruned, _ = sp.prune_model(model, scores, r_b)
        x = rng.normal(size=(16, 16, 1))
        _, rep = acc.simulate_model(x, pruned, acc.HardwareConfig(b=b))
        n = cfg.num_tokens
        for j, (enc, layer) in enumerate(zip(pruned.encoders, rep.layers), start=1):
            r = sp.measured_ratios(enc)
            r_t = cfg.keep_rate_for(j)
            tdm = r_t is not None and r_t < 1
            nk = tp.tokens_after(n, r_t) if tdm else n
            inp = pm.ComplexityInputs(n, cfg.embed_dim, dh, cfg.mlp_dim, heads, alpha=r["alpha"],
                                      alpha_proj=r["alpha_proj"], alpha_mlp=r["alpha_mlp"],
                                      heads_kept=r["h_kept"], n_kept=nk)
            f = pm.complexity_pruned(inp, tdm)
            msa = sum(layer.macs[s] for s in ("qkv", "qk", "av", "proj"))
            assert msa == f["msa"]
            assert layer.macs["mlp_fc1"] + layer.macs["mlp_fc2"] == f["mlp"]
            assert layer.ops["layernorm"] == f["layernorm1"] + f["layernorm2"]
            assert layer.ops["residual"] == f["residual1"] + f["residual2"]
            assert layer.ops["tdm"] == f["tdm"]
            assert layer.n_out == nk
            n = nk


# -- 5: token-count law ---------------------------------------------------------

def test_criterion_05_token_count_law():
    for r_t, want in ((0.5, 100), (0.7, 140), (0.9, 179)):
        assert tp.tokens_after(197, r_t) == want == int(np.ceil(196 * r_t)) + 2
    cfg = vitref.deit_small(keep_rate=0.7)
    model = vitref.random_model(cfg, 0)
    x = np.random.default_rng(0).normal(size=(224, 224, 3))
    res = vitref.run_model(x, model)
    predicted = tp.token_trajectory(197, 12, (3, 7, 10), 0.7)
    assert res.token_counts == predicted
    assert predicted[3] == 140


# -- 6: load-balance dominance -----------------------------------------------------

def test_criterion_06_load_balance_dominance():
    rng = np.random.default_rng(6)
    for i in range(50):
        b = 8
        hw = acc.HardwareConfig(p_h=int(rng.integers(1, 4)), p_t=int(rng.integers(1, 9)),
                                p_c=int(rng.integers(2, 5)), p_pe=8, b=b)
        rows_b = int(rng.integers(2, 12))
        cols = int(rng.integers(2, 13))
        counts = np.minimum(rows_b, rng.geometric(0.35, size=cols))  # skewed
        counts[rng.integers(cols)] = rows_b
        mask = np.zeros((rows_b, cols), dtype=bool)
        for c, k in enumerate(counts):
            mask[rng.choice(rows_b, k, replace=False), c] = True
        w = bm.sparse_from_array(rng.normal(size=(rows_b * b, cols * b)), b, mask)
        x = bm.partition_dense(rng.normal(size=(int(rng.integers(1, 30)) * b, rows_b * b)), b)
        y_l, lpt = acc.simulate_sbmm(x, w, hw, group_width=cols * b, assignment="balanced")
        y_r, rr = acc.simulate_sbmm(x, w, hw, group_width=cols * b, assignment="round_robin")
        assert lpt.cycles <= rr.cycles
        assert y_l == y_r
        uni = bm.sparse_from_array(rng.normal(size=(rows_b * b, hw.p_c * 3 * b)), b)
        _, lu = acc.simulate_sbmm(x, uni, hw, assignment="balanced")
        _, ru = acc.simulate_sbmm(x, uni, hw, assignment="round_robin")
        assert lu.cycles == ru.cycles


# -- 7: directional latency ------------------------------------------------------

@pytest.fixture(scope="module")
def table_cycles():
    """Simulated total cycles over the published pruning grid."""
    x = np.random.default_rng(0).normal(size=(224, 224, 3))
    out = {}
    for b in (16, 32):
        cfg = vitref.deit_small(block_size=b)
        model = vitref.random_model(cfg, 0)
        scores = vitref.random_scores(cfg, 1)
        hw = acc.HardwareConfig(b=b)
        for r_b in (0.5, 0.7):
            pruned, _ = sp.prune_model(model, scores, r_b)
            for r_t in (0.5, 0.7, 0.9):
                _, rep = acc.simulate_model(x, vitref.with_keep_rate(pruned, r_t), hw)
                out[b, r_b, r_t] = rep.total_cycles
    return out


@pytest.mark.parametrize("b", [16, 32])
def test_criterion_07_directional_latency(table_cycles, b):
    c = {k[1:]: v for k, v in table_cycles.items() if k[0] == b}
    assert c[0.7, 0.9] > c[0.7, 0.7] > c[0.7, 0.5]
    for r_t in (0.5, 0.7, 0.9):
        assert c[0.7, r_t] > c[0.5, r_t]


# -- 8: identity-pruning exactness -------------------------------------------------

def test_criterion_08_identity_pruning(tiny_cfg):
    cfg = replace(tiny_cfg, use_bias=True)
    model = vitref.random_model(cfg, 11)
    scores = vitref.random_scores(cfg, 12)
    x = np.random.default_rng(13).normal(size=(32, 32, 3))
    pruned, _ = sp.prune_model(model, scores, 1.0)
    a = vitref.model_forward(x, vitref.with_keep_rate(pruned, 1.0))
    np.testing.assert_array_equal(a, vitref.model_forward(x, model))
    logits, _ = acc.simulate_model(x, vitref.with_keep_rate(pruned, 1.0), acc.HardwareConfig(b=cfg.block_size))
    np.testing.assert_array_equal(logits, a)

    # a head whose W_proj rows are all masked contributes nothing, whatever its Q/K/V hold
    enc = model.encoders[0]
    per = enc.head_blocks()
    g = np.ones(enc.wproj.grid, dtype=bool)
    g[:per] = False
    cut = replace(enc, wproj=bm.compress(bm.decompress(enc.wproj), g))
    zeroed = bm.decompress(enc.wproj).to_array()
    zeroed[:enc.head_dim] = 0.0
    same = replace(enc, wproj=bm.sparse_from_array(zeroed, enc.b))
    m1 = replace(model, encoders=(cut,) + model.encoders[1:])
    m2 = replace(model, encoders=(same,) + model.encoders[1:])
    assert 0 not in cut.live_heads()
    np.testing.assert_allclose(vitref.model_forward(x, m1), vitref.model_forward(x, m2), rtol=0, atol=1e-15)


# -- 9: utilization bound --------------------------------------------------------

def test_criterion_09_utilization_bound():
    cfg = vitref.ModelConfig(depth=4, num_heads=4, embed_dim=64, head_dim=16, mlp_dim=128, image_size=64,
                             patch_size=8, in_chans=3, num_classes=10, block_size=8, tdm_layers=(2,),
                             keep_rate=0.9)
    hw = acc.HardwareConfig(p_h=4, p_t=1, p_c=2, p_pe=8, b=8)
    model = vitref.random_model(cfg, 0)
    x = np.random.default_rng(0).normal(size=(64, 64, 3))
    _, rep = acc.simulate_model(x, model, hw)
    n_min = min(r.n_out for r in rep.layers)
    assert hw.p_t * hw.b <= n_min / 6
    assert rep.utilization() > 0.85


# -- 10: accuracy column ------------------------------------------------------------

def test_criterion_10_accuracy_not_reproducible():
    pytest.skip("ImageNet top-1 accuracy needs 30 epochs of ImageNet fine-pruning; "
                "substituted by criteria 1-9 and the per-module property tests")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
