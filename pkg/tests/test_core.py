import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bilinear_naive, conv1d_naive, layer_norm_naive, matmul_naive, sepconv_naive
from textmamba.core import (SepConvParams, add_leading, bilinear_sample, bilinear_sample_bwd,
                            bilinear_sample_fwd, conv1d, conv1d_bwd, conv1d_fwd, finite_diff_grad,
                            identity_sepconv, init_sepconv, layer_norm, layer_norm_bwd, layer_norm_fwd,
                            linear, linear_bwd, linspace_grid, matmul, relative_error, reshape,
                            separable_conv2d, separable_conv2d_bwd, separable_conv2d_fwd, sigmoid,
                            softmax, softmax_bwd, upsample_to, upsample_to_bwd)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    x = np.random.default_rng(0).standard_normal((3, 5))
    assert np.array_equal(matmul(np.eye(3), x), x)


def test_matmul_hand_case():
    assert np.array_equal(matmul(np.array([[1., 2.], [3., 4.]]), np.array([[0.], [1.]])),
                          np.array([[2.], [4.]]))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("seed", range(3))
def test_matmul_matches_triple_loop_exactly(seed, dtype):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((8, 8)).astype(dtype)
    b = rng.standard_normal((8, 8)).astype(dtype)
    assert np.array_equal(matmul(a, b), matmul_naive(a, b))


def test_matmul_up_to_extent_16():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((16, 11)), rng.standard_normal((11, 16))
    assert np.array_equal(matmul(a, b), matmul_naive(a, b))


def test_matmul_rejects_mismatch_naming_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_bit_identical_across_runs():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((9, 7)), rng.standard_normal((7, 4))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


# -- shapes ---------------------------------------------------------------------

@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_reshape_roundtrip(shape, rnd):
    x = np.arange(math.prod(shape), dtype=np.float64).reshape(shape)
    flat = list(shape)
    rnd.shuffle(flat)
    assert np.array_equal(reshape(reshape(x, flat), shape), x)


def test_reshape_rejects_count_change():
    with pytest.raises(ValueError):
        reshape(np.zeros(6), (4, 2))


def test_add_leading_broadcast_one_axis_only():
    x = np.ones((3, 2, 4))
    assert add_leading(x, np.ones((2, 4))).shape == (3, 2, 4)
    with pytest.raises(ValueError):
        add_leading(x, np.ones(4))


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    assert np.array_equal(layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4)), np.zeros((1, 4)))


def test_layer_norm_two_point():
    out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=0.0)
    assert np.array_equal(out, [[-1.0, 1.0]])


def test_layer_norm_moments():
    x = np.random.default_rng(0).standard_normal((4, 8)) * 3 + 1
    out = layer_norm(x, np.ones(8), np.zeros(8))
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1) <= 1e-5)


def test_layer_norm_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((5, 6)), rng.standard_normal(6), rng.standard_normal(6)
    assert np.allclose(layer_norm(x, g, b), layer_norm_naive(x, g, b), rtol=0, atol=1e-12)


def test_layer_norm_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        layer_norm(np.zeros((2, 4)), np.ones(3), np.zeros(3))


def test_layer_norm_gradient():
    rng = np.random.default_rng(0)
    x, g, b = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)
    R = rng.standard_normal((4, 8))
    _, cache = layer_norm_fwd(x, g, b)
    dx, dg, db = layer_norm_bwd(R, cache)
    rep = finite_diff_grad(lambda: float((layer_norm(x, g, b) * R).sum()), {"x": x, "g": g, "b": b},
                           {"x": dx, "g": dg, "b": db})
    assert rep.max_relative_error <= 1e-6


# -- softmax / sigmoid ------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_stable_for_large_logits():
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] < 1e-300


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_softmax_is_a_distribution(x):
    y = softmax(x)
    assert np.all(y >= 0)
    assert abs(y.sum() - 1) <= 1e-6


def test_softmax_bwd_against_finite_differences():
    rng = np.random.default_rng(2)
    x, R = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    dx = softmax_bwd(R, softmax(x, axis=1), axis=1)
    rep = finite_diff_grad(lambda: float((softmax(x, axis=1) * R).sum()), {"x": x}, {"x": dx})
    assert rep.max_relative_error <= 1e-8


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-800, 800)))
def test_sigmoid_never_overflows(x):
    y = sigmoid(x)
    assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))


def test_linear_gradient():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    R = rng.standard_normal((2, 3, 5))
    dx, dw, db = linear_bwd(R, x, w)
    rep = finite_diff_grad(lambda: float((linear(x, w, b) * R).sum()), {"x": x, "w": w, "b": b},
                           {"x": dx, "w": dw, "b": db})
    assert rep.max_relative_error <= 1e-8


# -- conv1d ---------------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 5, 3))
    assert np.array_equal(conv1d(x, np.eye(3)[None], np.zeros(3)), x)


def test_conv1d_zero_weights_give_bias():
    x = np.random.default_rng(0).standard_normal((2, 16, 3))
    out = conv1d(x, np.zeros((9, 3, 2)), np.array([0.5, -1.0]))
    assert out.shape == (2, 16, 2)
    assert np.array_equal(out, np.broadcast_to([0.5, -1.0], out.shape))


@pytest.mark.parametrize("ks,n", [(1, 4), (9, 16), (9, 5)])
def test_conv1d_matches_sliding_window(ks, n):
    rng = np.random.default_rng(ks + n)
    x = rng.standard_normal((2, n, 3))
    w, b = rng.standard_normal((ks, 3, 4)), rng.standard_normal(4)
    assert np.array_equal(conv1d(x, w, b), conv1d_naive(x, w, b))


def test_conv1d_rejects_even_kernel():
    with pytest.raises(ValueError, match="even"):
        conv1d(np.zeros((1, 4, 2)), np.zeros((2, 2, 2)), np.zeros(2))


def test_conv1d_gradient():
    rng = np.random.default_rng(6)
    x, w, b = rng.standard_normal((2, 6, 3)), rng.standard_normal((9, 3, 2)), rng.standard_normal(2)
    R = rng.standard_normal((2, 6, 2))
    _, cache = conv1d_fwd(x, w, b)
    dx, dw, db = conv1d_bwd(R, cache)
    rep = finite_diff_grad(lambda: float((conv1d(x, w, b) * R).sum()), {"x": x, "w": w, "b": b},
                           {"x": dx, "w": dw, "b": db})
    assert rep.max_relative_error <= 1e-8


# -- separable conv ---------------------------------------------------------------

def test_separable_identity():
    x = np.random.default_rng(0).standard_normal((5, 4, 3))
    assert np.array_equal(separable_conv2d(x, identity_sepconv(3)), x)


@pytest.mark.parametrize("H,W,stride,expect", [(8, 8, 2, (4, 4)), (5, 3, 2, (3, 2)), (5, 5, 1, (5, 5))])
def test_separable_output_extent(H, W, stride, expect):
    p = init_sepconv(np.random.default_rng(0), 2, 3)
    assert separable_conv2d(np.zeros((H, W, 2)), p, stride).shape == expect + (3,)


@pytest.mark.parametrize("stride", [1, 2])
def test_separable_matches_nested_loops(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((5, 5, 2))
    p = init_sepconv(rng, 2, 3)
    ref = sepconv_naive(x, p.dw, p.dw_b, p.pw, p.pw_b, stride)
    assert np.array_equal(separable_conv2d(x, p, stride), ref)


def test_separable_rejects_stride():
    with pytest.raises(ValueError, match="stride"):
        separable_conv2d(np.zeros((4, 4, 2)), identity_sepconv(2), 3)


@pytest.mark.parametrize("stride", [1, 2])
def test_separable_gradient(stride):
    rng = np.random.default_rng(10 + stride)
    x = rng.standard_normal((5, 4, 2))
    p = init_sepconv(rng, 2, 3)
    out, cache = separable_conv2d_fwd(x, p, stride)
    R = rng.standard_normal(out.shape)
    dx, g = separable_conv2d_bwd(R, cache)
    params = {"x": x, "dw": p.dw, "dw_b": p.dw_b, "pw": p.pw, "pw_b": p.pw_b}
    rep = finite_diff_grad(lambda: float((separable_conv2d(x, p, stride) * R).sum()), params,
                           {"x": dx, **g})
    assert rep.max_relative_error <= 1e-8


def test_upsample_adjoint():
    # <up(x), y> == <x, up^T(y)> for any x, y
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 2, 2)), rng.standard_normal((5, 4, 2))
    assert math.isclose(float((upsample_to(x, 5, 4) * y).sum()),
                        float((x * upsample_to_bwd(y, 3, 2)).sum()), rel_tol=1e-12)


# -- bilinear sampling --------------------------------------------------------------

def test_bilinear_pixel_center():
    fmap = np.arange(12, dtype=float).reshape(3, 4, 1)
    pts = np.array([[(2 + 0.5) / 4, (1 + 0.5) / 3]])
    assert np.allclose(bilinear_sample(fmap, pts), fmap[1, 2], rtol=0, atol=1e-12)


def test_bilinear_far_outside_is_zero():
    fmap = np.ones((4, 4, 2))
    assert np.array_equal(bilinear_sample(fmap, np.array([[5.0, -3.0], [-1.0, 0.5]])), np.zeros((2, 2)))


def test_bilinear_midpoint_of_2x2():
    fmap = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    assert bilinear_sample(fmap, np.array([[0.5, 0.5]]))[0, 0] == 1.5


@given(arrays(np.float64, (6, 2), elements=st.floats(-0.3, 1.3)))
@settings(max_examples=50)
def test_bilinear_matches_scalar_oracle(pts):
    fmap = np.random.default_rng(0).standard_normal((3, 5, 2))
    assert np.allclose(bilinear_sample(fmap, pts), bilinear_naive(fmap, pts), rtol=0, atol=1e-12)


def test_bilinear_gradient():
    rng = np.random.default_rng(1)
    fmap = rng.standard_normal((4, 3, 2))
    pts = rng.uniform(0.05, 0.95, (5, 2))
    R = rng.standard_normal((5, 2))
    _, cache = bilinear_sample_fwd(fmap, pts)
    dmap, dpts = bilinear_sample_bwd(R, cache)
    rep = finite_diff_grad(lambda: float((bilinear_sample(fmap, pts) * R).sum()),
                           {"map": fmap, "pts": pts}, {"map": dmap, "pts": dpts})
    assert rep.max_relative_error <= 1e-7


# -- grids ---------------------------------------------------------------------------

def test_grid_corners():
    g = linspace_grid(2, 2)
    assert np.array_equal(g.reshape(4, 2), [[0, 0], [1, 0], [0, 1], [1, 1]])


def test_grid_single_row():
    g = linspace_grid(1, 3)
    assert np.array_equal(g[0, :, 1], [0.5] * 3)
    assert np.array_equal(g[0, :, 0], [0, 0.5, 1])


def test_grid_uniform_spacing():
    g = linspace_grid(4, 4)
    assert np.allclose(np.diff(g[0, :, 0]), 1 / 3, rtol=0, atol=1e-15)
    assert np.allclose(np.diff(g[:, 0, 1]), 1 / 3, rtol=0, atol=1e-15)


def test_grid_rejects_zero():
    with pytest.raises(ValueError):
        linspace_grid(0, 3)


# -- gradient oracle ---------------------------------------------------------------

def test_fd_quadratic():
    theta = np.array([3.0])
    rep = finite_diff_grad(lambda: float(theta[0] ** 2), {"t": theta}, {"t": np.array([6.0])})
    assert rep.max_relative_error <= 1e-8
    assert theta[0] == 3.0  # restored after probing


def test_fd_layer_norm_sum():
    rng = np.random.default_rng(7)
    # unit gamma would make the sum identically zero; a random gamma keeps it informative
    x, g, b = rng.standard_normal((3, 5)), rng.standard_normal(5), np.zeros(5)
    _, cache = layer_norm_fwd(x, g, b)
    dx, _, _ = layer_norm_bwd(np.ones((3, 5)), cache)
    rep = finite_diff_grad(lambda: float(layer_norm(x, g, b).sum()), {"x": x}, {"x": dx})
    assert rep.max_relative_error <= 1e-6


def test_fd_report_max_is_max_of_parameters():
    a, b = np.array([1.0, 2.0]), np.array([0.5])
    rep = finite_diff_grad(lambda: float((a ** 2).sum() + 3 * b[0]), {"a": a, "b": b},
                           {"a": np.array([2.0, 4.5]), "b": np.array([3.0])})
    assert rep.max_relative_error == max(rep.per_parameter_errors.values())
    assert rep.per_parameter_errors["a"] > 0.05


def test_fd_nonfinite_is_reported_not_raised():
    a = np.array([1.0, 2.0])
    rep = finite_diff_grad(lambda: float("nan") if a[1] != 2.0 else float(a[0] ** 2), {"a": a},
                           {"a": np.array([2.0, 0.0])})
    assert rep.nonfinite == ["a[1]"]
    assert rep.max_relative_error <= 1e-8


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(0.1)


def test_sepconv_params_dataclass_names():
    p = identity_sepconv(2)
    assert isinstance(p, SepConvParams)
