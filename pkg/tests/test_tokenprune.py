import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsim import tokenprune as tp
from vitsim.errors import InvalidArgument


def softmax_rows(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_importance_uniform_and_mean():
    np.testing.assert_allclose(tp.importance_scores(np.full((1, 4, 4), 0.25)), [0.25] * 4)
    a = np.zeros((2, 3, 3))
    a[0, 0] = [1, 0, 0]
    a[1, 0] = [0, 1, 0]
    np.testing.assert_allclose(tp.importance_scores(a), [0.5, 0.5, 0.0])


def test_importance_sums_to_one():
    a = softmax_rows(np.random.default_rng(0).normal(size=(6, 9, 9)))
    assert tp.importance_scores(a).sum() == pytest.approx(1.0, abs=1e-6)


def test_importance_shape_errors():
    with pytest.raises(InvalidArgument):
        tp.importance_scores(np.ones((2, 3, 4)))
    with pytest.raises(InvalidArgument):
        tp.importance_scores(np.ones((0, 3, 3)))


@pytest.mark.parametrize("r_t, n_out", [(0.5, 100), (0.7, 140), (0.9, 179)])
def test_token_count_law(r_t, n_out):
    assert tp.tokens_after(197, r_t) == n_out == math.ceil(196 * r_t) + 2


def test_select_rate_one_is_identity():
    z = np.random.default_rng(1).normal(size=(6, 4))
    out, routing = tp.select_and_fuse(z, np.arange(6.0), 1.0)
    assert out is z or np.array_equal(out, z)
    assert routing.is_identity() and routing.n_out == 6


def test_select_hand_example():
    z = np.array([[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    out, routing = tp.select_and_fuse(z, [0.0, 0.5, 0.3, 0.2], 0.33)
    assert out.shape == (3, 2)
    np.testing.assert_array_equal(out[0], z[0])
    np.testing.assert_array_equal(out[1], z[1])
    np.testing.assert_allclose(out[2], (0.3 * z[2] + 0.2 * z[3]) / 0.5, rtol=1e-15)
    assert routing.entries == ((0, 0, 1), (1, 1, 1), (2, 2, 0), (3, 2, 0))


def test_select_rate_034_keeps_two_of_three():
    # ceil(3 * 0.34) = ceil(1.02) = 2
    _, routing = tp.select_and_fuse(np.zeros((4, 2)), [0.0, 0.5, 0.3, 0.2], 0.34)
    assert routing.kept == 3 and routing.dropped == (3,)


def test_fused_weights_fallback_on_zero_scores():
    z = np.array([[0.0], [1.0], [2.0], [4.0]])
    out, _ = tp.select_and_fuse(z, [1.0, 0.0, 0.0, 0.0], 0.34)
    assert out[-1, 0] == pytest.approx(4.0)
    out, _ = tp.select_and_fuse(z, [1.0, 1.0, 0.0, 0.0], 0.3)
    assert out[-1, 0] == pytest.approx(3.0)


def test_select_errors():
    with pytest.raises(InvalidArgument):
        tp.select_and_fuse(np.zeros((1, 3)), [1.0], 0.5)
    with pytest.raises(InvalidArgument):
        tp.select_and_fuse(np.zeros((3, 3)), [1.0, 2.0], 0.5)
    with pytest.raises(InvalidArgument):
        tp.select_and_fuse(np.zeros((3, 3)), [1.0, 2.0, 3.0], 0.0)


def test_tdm_layers():
    assert tp.tdm_layers() == {3, 7, 10}
    assert tp.tdm_layers([]) == frozenset()
    assert tp.token_trajectory(197, 12, [], 0.5) == [197] * 13
    with pytest.raises(InvalidArgument):
        tp.tdm_layers([13], 12)
    with pytest.raises(InvalidArgument):
        tp.tdm_layers([0], 12)


def test_trajectory_default():
    traj = tp.token_trajectory(197, 12, tp.DEFAULT_TDM_LAYERS, 0.7)
    assert traj == [197, 197, 197, 140, 140, 140, 140, 100, 100, 100, 72, 72, 72]
    assert tp.token_trajectory(197, 12, (3,), 0.5, overrides={3: 0.9})[3] == 179


def test_routing_json():
    _, routing = tp.select_and_fuse(np.zeros((4, 1)), [0, 3, 2, 1], 0.34)
    js = routing.to_json()
    assert js["kept"] == 3 and js["entries"][3] == [3, 3, 0]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_kept_set_is_top_k(n, r_t, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, size=n).astype(float)  # plenty of ties
    z = rng.normal(size=(n, 3))
    out, routing = tp.select_and_fuse(z, s, r_t)
    k = math.ceil(round((n - 1) * r_t, 9))
    brute = sorted(range(1, n), key=lambda i: (-s[i], i))[:k]
    if k == n - 1:
        assert routing.is_identity()
        return
    assert routing.kept_order() == [0] + brute
    assert out.shape[0] == k + 2
    new_ids = sorted(e[1] for e in routing.entries if e[2])
    assert new_ids == list(range(k + 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.floats(0.01, 0.95), st.integers(0, 2**31))
def test_fused_in_convex_hull(n, r_t, seed):
    rng = np.random.default_rng(seed)
    s = rng.random(n)
    z = rng.normal(size=(n, 2))
    out, routing = tp.select_and_fuse(z, s, r_t)
    if routing.is_identity():
        return
    d = list(routing.dropped)
    w = s[d] / s[d].sum()
    assert w.sum() == pytest.approx(1.0)
    fused = out[-1]
    assert np.all(fused >= z[d].min(0) - 1e-12) and np.all(fused <= z[d].max(0) + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_permutation_commutes(n, r_t, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n).astype(float) + 1  # distinct
    z = rng.normal(size=(n, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
    a, routing = tp.select_and_fuse(z, s, r_t)
    b, _ = tp.select_and_fuse(z[perm], s[perm], r_t)
    if routing.is_identity():
        # nothing dropped: rows stay in input order
        a = a[perm]
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 300), st.floats(0.02, 0.98))
def test_count_monotone_in_rate(n, r_t):
    lo = tp.tokens_after(n, r_t)
    hi = tp.tokens_after(n, min(1.0, r_t + 0.02))
    assert lo <= hi
