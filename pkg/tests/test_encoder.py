import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textmamba.core import finite_diff_grad, layer_norm
from textmamba.deform_attn import deformable_attention, reference_points
from textmamba.encoder import (EmbeddingSequence, MixSSMConfig, dsffn_bwd, dsffn_forward, dsffn_fwd,
                               encoder_bwd, encoder_forward, encoder_fwd, init_block, init_dsffn,
                               mix_ssm_block, mix_ssm_block_fwd, ss2d_stage_fwd)
from textmamba.gradcheck import fixture_block, fixture_dsffn

SHAPES = [(4, 4), (2, 2)]


def _seq(seed=0, C=16, shapes=SHAPES):
    L = sum(h * w for h, w in shapes)
    return EmbeddingSequence(np.random.default_rng(seed).standard_normal((L, C)), shapes)


def _block(seed=0, C=16, **kw):
    return init_block(np.random.default_rng(seed), C, heads=2, levels=len(SHAPES), points=2,
                      state_dim=4, **kw)


# -- embedding sequence -------------------------------------------------------------

@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=4))
def test_level_partition_and_roundtrip(shapes):
    seq = _seq(0, 3, shapes)
    covered = np.concatenate([np.arange(seq.level_offsets[l], seq.level_offsets[l + 1])
                              for l in range(len(shapes))])
    assert np.array_equal(covered, np.arange(seq.tokens.shape[0]))
    for l, (h, w) in enumerate(shapes):
        assert seq.level_map(l).shape == (h, w, 3)
    assert np.array_equal(EmbeddingSequence.from_maps(seq.maps()).tokens, seq.tokens)


def test_partition_mismatch_rejected():
    with pytest.raises(ValueError):
        EmbeddingSequence(np.zeros((5, 2)), [(2, 2)])


# -- DSFFN ----------------------------------------------------------------------------

def test_dsffn_widths():
    p = init_dsffn(np.random.default_rng(0), 6)
    assert p.W_e1.shape == (6, 12) and p.W_r1.shape == (12, 6)
    assert p.W_e2.shape == (6, 24) and p.W_r2.shape == (24, 6)


def test_dsffn_zero_branches_return_normalized_input():
    p = init_dsffn(np.random.default_rng(0), 8)
    for w in (p.W_e1, p.W_e2, p.W_r1, p.W_r2):
        w[...] = 0
    x = np.random.default_rng(1).standard_normal((5, 8))
    assert np.array_equal(dsffn_forward(x, p), layer_norm(x, p.norm_g, p.norm_b))


def test_dsffn_constructed_doubling():
    # E1 = [I, -I], R1 = [I; -I]: relu(l) - relu(-l) = l, so the first branch reproduces L_in
    C = 4
    p = init_dsffn(np.random.default_rng(0), C)
    I = np.eye(C)
    p.W_e1[...] = np.hstack([I, -I])
    p.W_r1[...] = np.vstack([I, -I])
    p.W_e2[...] = 0
    p.W_r2[...] = 0
    x = np.random.default_rng(2).standard_normal((6, C))
    l_in = layer_norm(x, p.norm_g, p.norm_b)
    assert np.allclose(dsffn_forward(x, p), 2 * l_in, rtol=0, atol=1e-6)


def test_dsffn_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        dsffn_forward(np.zeros((2, 3)), init_dsffn(np.random.default_rng(0), 4))


def test_dsffn_fd_gradient():
    f, params, grads = fixture_dsffn()
    assert finite_diff_grad(f, params, grads).max_relative_error <= 1e-4


def test_dsffn_zero_upstream():
    p = init_dsffn(np.random.default_rng(0), 4)
    _, cache = dsffn_fwd(np.random.default_rng(1).standard_normal((3, 4)), p)
    dx, g = dsffn_bwd(np.zeros((3, 4)), cache)
    assert not dx.any() and not any(v.any() for v in g.values())


# -- block --------------------------------------------------------------------------

def test_block_preserves_shape():
    seq = _seq()
    out = mix_ssm_block(seq, _block(), MixSSMConfig(num_blocks=1))
    assert out.tokens.shape == seq.tokens.shape and out.level_shapes == seq.level_shapes


def test_bypassed_block_is_plain_deformable_layer():
    seq = _seq(1)
    blk = _block(1, enable_ss2d=False, enable_dsffn=False)
    cfg = MixSSMConfig(num_blocks=1, enable_ss2d=False, enable_dsffn=False, enable_topk=False)
    ref = reference_points(SHAPES)
    a = deformable_attention(seq.tokens, seq.maps(), ref, blk.attn, k=None)
    expect = layer_norm(seq.tokens + a, blk.norm1_g, blk.norm1_b)
    assert np.array_equal(mix_ssm_block(seq, blk, cfg).tokens, expect)


def test_constructed_degeneracy_reduces_to_dsffn():
    seq = _seq(2)
    blk = _block(2, zero_ss2d_out=False)
    blk.attn.W_out[...] = 0
    for s6 in blk.ss2d.paths:
        s6.W_B[...] = 0
        s6.b_B[...] = 0
        s6.D[...] = 0
    normed = layer_norm(seq.tokens, blk.norm1_g, blk.norm1_b)
    out = mix_ssm_block(seq, blk, MixSSMConfig(num_blocks=1))
    # the second layer norm re-normalizes an already normalized row, which only moves it by ~eps
    assert np.allclose(out.tokens, dsffn_forward(normed, blk.dsffn), rtol=0, atol=1e-4)


def test_topk_off_equals_dense_k():
    seq = _seq(3)
    blk = _block(3)
    off = mix_ssm_block(seq, blk, MixSSMConfig(num_blocks=1, enable_topk=False))
    dense = mix_ssm_block(seq, blk, MixSSMConfig(num_blocks=1, k=blk.attn.levels * blk.attn.points))
    assert off.tokens.tobytes() == dense.tokens.tobytes()


def test_topk_changes_output_when_sparse():
    seq = _seq(3)
    blk = _block(3)
    a = mix_ssm_block(seq, blk, MixSSMConfig(num_blocks=1, k=1)).tokens
    b = mix_ssm_block(seq, blk, MixSSMConfig(num_blocks=1, enable_topk=False)).tokens
    assert not np.array_equal(a, b)


def test_ss2d_stage_is_per_level():
    rng = np.random.default_rng(4)
    blk = _block(4, zero_ss2d_out=False)
    x1 = rng.standard_normal((20, 16))
    base, _ = ss2d_stage_fwd(x1, SHAPES, blk.ss2d)
    x1b = x1.copy()
    x1b[17] += 1.0  # a level-1 token
    moved, _ = ss2d_stage_fwd(x1b, SHAPES, blk.ss2d)
    assert np.array_equal(moved[:16], base[:16])
    assert not np.array_equal(moved[16:], base[16:])


def test_block_golden_bit_stable():
    seq = _seq(5)
    blk = _block(5, zero_ss2d_out=False)
    cfg = MixSSMConfig(num_blocks=1)
    assert mix_ssm_block(seq, blk, cfg).tokens.tobytes() == mix_ssm_block(seq, blk, cfg).tokens.tobytes()


def test_block_fd_gradient():
    f, params, grads = fixture_block()
    rep = finite_diff_grad(f, params, grads, max_entries=8)
    assert rep.max_relative_error <= 1e-4


# -- stack ------------------------------------------------------------------------------

def test_single_block_stack_equals_block():
    seq = _seq(6)
    blk = _block(6)
    cfg = MixSSMConfig(num_blocks=1)
    assert np.array_equal(encoder_forward(seq, [blk], cfg).tokens, mix_ssm_block(seq, blk, cfg).tokens)


def test_stack_applies_blocks_in_order():
    seq = _seq(7)
    blocks = [_block(10 + i) for i in range(3)]
    cfg = MixSSMConfig(num_blocks=3)
    x = seq
    for b in blocks:
        x = mix_ssm_block(x, b, cfg)
    assert np.array_equal(encoder_forward(seq, blocks, cfg).tokens, x.tokens)


def test_stack_rejects_missing_blocks():
    with pytest.raises(ValueError):
        encoder_forward(_seq(), [_block()], MixSSMConfig(num_blocks=2))


def test_default_stack_depth():
    assert MixSSMConfig().num_blocks == 6


@given(st.integers(0, 2**31))
@settings(max_examples=5, deadline=None)
def test_stack_gradient_matches_directional_difference(seed):
    # directional derivative along a random input perturbation, two blocks deep
    rng = np.random.default_rng(seed)
    seq = _seq(seed % 1000, C=8)
    blocks = [init_block(rng, 8, heads=2, levels=2, points=2, state_dim=4) for _ in range(2)]
    cfg = MixSSMConfig(num_blocks=2, enable_topk=False)
    R = rng.standard_normal(seq.tokens.shape)
    _, caches = encoder_fwd(seq, blocks, cfg)
    dx, _ = encoder_bwd(R, caches)
    v = rng.standard_normal(seq.tokens.shape)
    eps = 1e-6

    def f(t):
        return float((encoder_forward(EmbeddingSequence(t, SHAPES), blocks, cfg).tokens * R).sum())

    num = (f(seq.tokens + eps * v) - f(seq.tokens - eps * v)) / (2 * eps)
    assert abs(num - float((dx * v).sum())) <= 1e-4 * max(1.0, abs(num))
