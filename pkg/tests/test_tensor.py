import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgesegnet.errors import ArgumentError, ShapeError
from edgesegnet.tensor import (
    ConvParams,
    add_elementwise,
    argmax_channel,
    batch_norm,
    bilinear_upsample,
    col2im,
    conv2d,
    conv2d_output_shape,
    im2col,
    relu,
    resize_bilinear,
)

from helpers import bilinear_oracle, conv_oracle


def test_conv_identity_kernel_copies_input():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(x, ConvParams(w, padding=1)), x)


def test_conv_hand_computed_values():
    # 2x2 all-ones kernel sums each window.
    x = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    out = conv2d(x, ConvParams(w, bias=np.array([0.5])))
    np.testing.assert_array_equal(out[0, 0], [[12.5, 16.5], [24.5, 28.5]])


def test_conv_eight_by_eight_stride_eight_shape():
    assert conv2d_output_shape((1, 16, 176, 240), (256, 16, 8, 8), (8, 8)) == (1, 256, 22, 30)


@pytest.mark.parametrize(
    "x_shape, w_shape, stride, pad",
    [((1, 3, 5, 5), (2, 4, 3, 3), 1, 0), ((1, 3, 2, 2), (2, 3, 3, 3), 1, 0), ((1, 3, 7, 7), (2, 3, 8, 8), 8, 0)],
)
def test_conv_shape_errors(x_shape, w_shape, stride, pad):
    with pytest.raises(ShapeError):
        conv2d(np.zeros(x_shape), ConvParams(np.zeros(w_shape), stride=stride, padding=pad))


def test_conv_rejects_non_positive_stride():
    with pytest.raises((ArgumentError, ShapeError)):
        ConvParams(np.zeros((1, 1, 1, 1)), stride=0)


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), co=st.integers(1, 3),
    k=st.sampled_from([1, 2, 3]), s=st.integers(1, 3), p=st.integers(0, 1),
    h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16),
)
def test_conv_matches_oracle_property(n, c, co, k, s, p, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((co, c, k, k))
    b = rng.standard_normal(co)
    np.testing.assert_allclose(conv2d(x, ConvParams(wt, b, s, p)), conv_oracle(x, wt, b, s, p), rtol=1e-12, atol=1e-12)


@given(
    c=st.integers(1, 3), k=st.sampled_from([1, 2, 3]), s=st.integers(1, 3), p=st.integers(0, 2),
    h=st.integers(3, 8), w=st.integers(3, 8), seed=st.integers(0, 2**16),
)
def test_col2im_is_adjoint_of_im2col(c, k, s, p, h, w, seed):
    # <im2col(x), y> == <x, col2im(y)>
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, h, w))
    cols = im2col(x, k, k, (s, s), (p, p))
    y = rng.standard_normal(cols.shape)
    back = col2im(y, x.shape, k, k, (s, s), (p, p))
    assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


def test_batch_norm_inference_formula():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out = batch_norm(x, np.array([2.0]), np.array([1.0]), np.array([2.5]), np.array([1.25]), eps=0.0)
    expected = 2.0 * (x - 2.5) / np.sqrt(1.25) + 1.0
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_batch_norm_channel_mismatch():
    with pytest.raises(ShapeError):
        batch_norm(np.zeros((1, 3, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_relu_and_add():
    a = np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(relu(a).ravel(), [0, 0, 2])
    np.testing.assert_array_equal(add_elementwise(a, a).ravel(), [-2, 0, 4])
    with pytest.raises(ShapeError):
        add_elementwise(a, np.zeros((1, 2, 1, 1)))


def test_bilinear_constant_is_preserved():
    x = np.full((1, 2, 3, 5), 7.25)
    np.testing.assert_allclose(bilinear_upsample(x, 8), 7.25, rtol=0, atol=1e-12)


def test_bilinear_two_pixel_half_pixel_values():
    # Source [0, 1] at x2: output centers sit at -0.25, 0.25, 0.75, 1.25 in
    # source coordinates, clamped at the borders.
    x = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    out = bilinear_upsample(x, 2)
    np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out[0, 0, 1], [0.0, 0.25, 0.75, 1.0])


@given(h=st.integers(1, 4), w=st.integers(1, 4), scale=st.sampled_from([2, 3, 8]), seed=st.integers(0, 999))
def test_bilinear_matches_per_pixel_oracle(h, w, scale, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w))
    np.testing.assert_allclose(bilinear_upsample(x, scale), bilinear_oracle(x, (h * scale, w * scale)), atol=1e-12)


def test_bilinear_rejects_small_scale():
    with pytest.raises(ArgumentError):
        bilinear_upsample(np.zeros((1, 1, 2, 2)), 1)


def test_resize_bilinear_arbitrary_extent():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 7))
    np.testing.assert_allclose(resize_bilinear(x, (3, 4)), bilinear_oracle(x, (3, 4)), atol=1e-12)


def test_argmax_channel_ties_pick_first():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 2, 0, 1] = 1
    np.testing.assert_array_equal(argmax_channel(logits), [[[0, 2]]])


def test_kernels_do_not_mutate_inputs():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    x0, w0 = x.copy(), w.copy()
    conv2d(x, ConvParams(w, padding=1))
    bilinear_upsample(x, 2)
    relu(x)
    np.testing.assert_array_equal(x, x0)
    np.testing.assert_array_equal(w, w0)
