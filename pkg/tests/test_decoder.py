import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import assignment_cost, brute_force_matching, conv1d_naive
from textmamba.core import finite_diff_grad, inverse_sigmoid, linspace_grid, sigmoid
from textmamba.decoder import (anchor_priors, init_decoder, init_mask_head, init_refine_layer,
                               mask_head, match_predictions, matching_cost, refine_control_points,
                               select_proposals, top_indices)
from textmamba.gradcheck import fixture_mask_head, fixture_refine


# -- proposals ----------------------------------------------------------------------------

def test_total_selection_orders_by_score_then_index():
    s = np.array([0.3, 0.9, 0.3, 0.5])
    assert list(top_indices(s, 4)) == [1, 3, 0, 2]


def test_too_many_proposals_rejected():
    with pytest.raises(ValueError):
        top_indices(np.zeros(3), 4)


@given(arrays(np.float64, st.integers(1, 40), elements=st.sampled_from([0.1, 0.2, 0.5, 0.7, 0.9])),
       st.data())
def test_top_indices_match_sort_oracle(scores, data):
    K = data.draw(st.integers(1, len(scores)))
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert list(top_indices(scores, K)) == ranked[:K]


def test_zero_control_embeddings_repeat_token():
    rng = np.random.default_rng(0)
    tokens = rng.standard_normal((10, 4))
    W, b = rng.standard_normal((4, 1)), np.zeros(1)
    prop = select_proposals(tokens, W, b, np.zeros((16, 4)), 3)
    assert prop.embeddings.shape == (3, 16, 4)
    for k, i in enumerate(prop.source_indices):
        assert np.array_equal(prop.embeddings[k], np.repeat(tokens[i][None], 16, axis=0))
    assert np.all(np.diff(prop.scores) <= 0)


# -- mask head -----------------------------------------------------------------------------

def test_zero_mlp_gives_zero_mask_and_uniform_prior():
    rng = np.random.default_rng(1)
    p = init_mask_head(rng, 4, 16)
    p.mlp_W2[...] = 0
    _, mi = mask_head(rng.standard_normal((2, 16, 4)), rng.standard_normal((3, 5, 4)), p)
    assert not mi.any()
    assert np.allclose(anchor_priors(mi), 0.5, rtol=0, atol=1e-12)


def test_mask_embedding_matches_unfused_oracle():
    rng = np.random.default_rng(2)
    K, n, C = 2, 16, 4
    p = init_mask_head(rng, C, n)
    p.conv9_b[...] = rng.standard_normal(C)
    Q = rng.standard_normal((K, n, C))
    me, _ = mask_head(Q, rng.standard_normal((2, 2, C)), p)
    w = np.exp(p.qm_logits) / np.exp(p.qm_logits).sum()
    conv = conv1d_naive(conv1d_naive(Q, p.conv9_W, p.conv9_b), p.conv1_W, p.conv1_b)
    expect = 1 / (1 + np.exp(-conv.mean(axis=1))) + np.einsum("n,knc->kc", w, Q)
    assert np.allclose(me, expect, rtol=0, atol=1e-12)


def test_single_channel_mask_closed_form():
    rng = np.random.default_rng(3)
    C = 3
    p = init_mask_head(rng, C, 4, mask_dim=1)
    p.mlp_b1[...] = 5.0  # keep every hidden unit active
    p.proj_b[...] = 0.25
    Q = rng.standard_normal((1, 4, C))
    f3 = rng.standard_normal((2, 2, C))
    me, mi = mask_head(Q, f3, p)
    hidden = np.maximum(me[0] @ p.mlp_W1 + p.mlp_b1, 0)
    emb = float(hidden @ p.mlp_W2[:, 0] + p.mlp_b2[0])
    for y, x in itertools.product(range(2), range(2)):
        cell = sum(f3[y, x, c] * p.proj_W[c, 0] for c in range(C)) + p.proj_b[0]
        assert mi[0, y, x] == pytest.approx(emb * cell, abs=1e-12)


def test_mask_head_rejects_geometry_mismatch():
    p = init_mask_head(np.random.default_rng(0), 4, 16)
    with pytest.raises(ValueError):
        mask_head(np.zeros((1, 16, 4)), np.zeros((2, 2, 3)), p)
    with pytest.raises(ValueError):
        mask_head(np.zeros((1, 8, 4)), np.zeros((2, 2, 4)), p)


def test_mask_head_gradient():
    f, params, grads = fixture_mask_head()
    assert finite_diff_grad(f, params, grads).max_relative_error <= 1e-4


# -- anchor priors -------------------------------------------------------------------------

def test_linspace_grid_corners():
    g = linspace_grid(3, 5)
    assert np.array_equal(g[0, 0], [0, 0]) and np.array_equal(g[-1, -1], [1, 1])
    assert np.array_equal(g[1, 2], [0.5, 0.5])


@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (8, 8)])
def test_uniform_mask_prior_is_centre(h, w):
    assert np.allclose(anchor_priors(np.zeros((2, h, w))), 0.5, rtol=0, atol=1e-6)


def test_dominant_logit_picks_cell():
    m = np.zeros((1, 4, 5))
    m[0, 1, 3] = 1000
    assert np.allclose(anchor_priors(m)[0], linspace_grid(4, 5)[1, 3], rtol=0, atol=1e-12)


def test_priors_match_weighted_sum_oracle():
    m = np.random.default_rng(4).standard_normal((3, 4, 4))
    grid = linspace_grid(4, 4)
    for k in range(3):
        e = np.exp(m[k] - m[k].max())
        w = e / e.sum()
        expect = [sum(w[y, x] * grid[y, x, a] for y in range(4) for x in range(4)) for a in (0, 1)]
        assert np.allclose(anchor_priors(m)[k], expect, rtol=0, atol=1e-6)


@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-50, 50)))
def test_priors_in_unit_square(m):
    pr = anchor_priors(m)
    assert np.all(pr >= 0) and np.all(pr <= 1)


# -- refinement ----------------------------------------------------------------------------

def test_zero_offsets_fix_points_at_prior():
    rng = np.random.default_rng(5)
    layers = [init_refine_layer(rng, 8, zero_offsets=True) for _ in range(3)]
    priors = rng.uniform(0.1, 0.9, (2, 2))
    pts = refine_control_points(rng.standard_normal((2, 4, 8)), priors, layers)
    assert pts.shape == (3, 2, 4, 2)
    # sigmoid(logit(p)) is not bit-exact in floating point
    assert np.allclose(pts, np.broadcast_to(priors[None, :, None, :], pts.shape), rtol=0, atol=1e-12)


def test_constant_offset_closed_form():
    rng = np.random.default_rng(6)
    lp = init_refine_layer(rng, 8, zero_offsets=True)
    lp.off_b2[...] = [0.3, -0.7]
    priors = rng.uniform(0.1, 0.9, (2, 2))
    pts = refine_control_points(rng.standard_normal((2, 4, 8)), priors, [lp], num_layers=1)
    expect = sigmoid(inverse_sigmoid(priors) + lp.off_b2)
    assert np.allclose(pts[0], np.broadcast_to(expect[:, None, :], (2, 4, 2)), rtol=0, atol=1e-12)


def test_points_stay_in_unit_square():
    rng = np.random.default_rng(7)
    layers = [init_refine_layer(rng, 8) for _ in range(4)]
    for lp in layers:
        lp.off_W2 *= 50
    pts = refine_control_points(rng.standard_normal((3, 16, 8)), rng.uniform(0, 1, (3, 2)), layers)
    assert np.all(pts >= 0) and np.all(pts <= 1)


def test_refine_rejects_out_of_range_priors_and_depth():
    rng = np.random.default_rng(8)
    layers = [init_refine_layer(rng, 4)]
    with pytest.raises(ValueError):
        refine_control_points(np.zeros((1, 2, 4)), np.array([[1.2, 0.5]]), layers)
    with pytest.raises(ValueError):
        refine_control_points(np.zeros((1, 2, 4)), np.array([[0.2, 0.5]]), layers, num_layers=2)


def test_refine_gradient():
    f, params, grads = fixture_refine()
    assert finite_diff_grad(f, params, grads).max_relative_error <= 1e-4


def test_decoder_defaults():
    d = init_decoder(np.random.default_rng(0), 16)
    assert d.control_embed.shape == (16, 16) and len(d.layers) == 4


# -- matching ------------------------------------------------------------------------------

def test_single_target_picks_cheapest():
    cost = np.array([[3.0], [1.0], [2.0]])
    assert match_predictions(None, None, None, cost=cost) == [(1, 0)]


def test_ties_pick_lowest_proposal():
    assert match_predictions(None, None, None, cost=np.ones((4, 2))) == [(0, 0), (1, 1)]


def test_infeasible_rejected():
    with pytest.raises(ValueError):
        match_predictions(None, None, None, cost=np.zeros((2, 3)))


def test_four_targets_six_proposals_brute_force():
    cost = np.random.default_rng(9).uniform(0, 1, (6, 4))
    best, perm = brute_force_matching(cost)
    got = match_predictions(None, None, None, cost=cost)
    assert [p for p, _ in got] == list(perm)
    assert assignment_cost(cost, got) == pytest.approx(best, abs=1e-12)


@given(st.integers(1, 6), st.integers(0, 2**31), st.booleans())
@settings(max_examples=80, deadline=None)
def test_matching_equals_brute_force(K, seed, coarse):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, min(K, 5) + 1))
    # coarse costs create many tied optima, exercising the tie rule
    cost = rng.integers(0, 3, (K, T)).astype(float) if coarse else rng.uniform(0, 1, (K, T))
    best, perm = brute_force_matching(cost)
    got = match_predictions(None, None, None, cost=cost)
    assert [p for p, _ in got] == list(perm)
    assert abs(assignment_cost(cost, got) - best) <= 1e-12


def test_matching_cost_formula():
    rng = np.random.default_rng(10)
    scores = rng.uniform(0, 1, 3)
    pts, gt = rng.uniform(0, 1, (3, 4, 2)), rng.uniform(0, 1, (2, 4, 2))
    c = matching_cost(scores, pts, gt)
    for k in range(3):
        for t in range(2):
            l1 = np.abs(pts[k] - gt[t]).sum() / 8
            assert c[k, t] == pytest.approx(2 * (1 - scores[k]) + 5 * l1, abs=1e-12)
