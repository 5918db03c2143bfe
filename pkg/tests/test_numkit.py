import math

import numpy as np
import pytest

from models.numkit import (
    avgpool2,
    avgpool_backward,
    avgpool_forward,
    bce_with_logits_forward,
    bilinear_sample,
    bilinear_sample_forward,
    check_finite,
    conv2d_forward,
    gelu_forward,
    layer_norm_forward,
    linear_forward,
    softmax_lastdim,
    upsample_nearest,
)
from utils.errors import DimensionError, NumericError
from utils.tensor_io import decode_tensor, encode_tensor, load_checkpoint, save_checkpoint


def test_linear_identity_and_hand_arithmetic():
    y, _ = linear_forward([1.0, 2.0], np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(y, [1.0, 2.0])
    y, _ = linear_forward([1.0, 1.0], [[2.0], [3.0]], [1.0])
    np.testing.assert_array_equal(y, [6.0])


def test_linear_matches_triple_loop(rng):
    x = rng.standard_normal((3, 4))
    W = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * W[k, j]
            expected[i, j] = acc
    y, _ = linear_forward(x, W, b)
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-14)


def test_linear_shape_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis -1"):
        linear_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_lastdim([0.0, 0.0, 0.0]), [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    y = softmax_lastdim([1000.0, 0.0])
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = softmax_lastdim(10.0 * rng.standard_normal((8, 32)))
    assert np.all(y >= 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_empty_last_axis():
    with pytest.raises(DimensionError):
        softmax_lastdim(np.zeros((3, 0)))


def test_bilinear_grid_point_and_midpoint(rng):
    fmap = rng.standard_normal((3, 5, 6))
    np.testing.assert_array_equal(bilinear_sample(fmap, (2, 3)), fmap[:, 2, 3])

    two = np.zeros((1, 3, 3))
    two[0, 1, 1], two[0, 1, 2] = 1.0, 3.0
    assert bilinear_sample(two, (1.0, 1.5))[0] == pytest.approx(2.0, abs=1e-15)


def test_bilinear_matches_four_term_oracle(rng):
    fmap = rng.standard_normal((2, 6, 7))
    C, H, W = fmap.shape
    points = rng.uniform(-1.5, 7.5, size=(50, 2))
    out, _ = bilinear_sample_forward(fmap, points)

    def value(r, c):
        if 0 <= r < H and 0 <= c < W:
            return fmap[:, r, c]
        return np.zeros(C)

    for p, got in zip(points, out):
        r0, c0 = math.floor(p[0]), math.floor(p[1])
        fr, fc = p[0] - r0, p[1] - c0
        expected = ((1 - fr) * (1 - fc) * value(r0, c0) + (1 - fr) * fc * value(r0, c0 + 1)
                    + fr * (1 - fc) * value(r0 + 1, c0) + fr * fc * value(r0 + 1, c0 + 1))
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-14)


def test_bilinear_outside_reads_zero(rng):
    fmap = rng.standard_normal((2, 4, 4))
    np.testing.assert_array_equal(bilinear_sample(fmap, (-5.0, 2.0)), np.zeros(2))
    np.testing.assert_array_equal(bilinear_sample(fmap, (1.0, 9.5)), np.zeros(2))


def test_bilinear_is_linear_in_map_values(rng):
    A = rng.standard_normal((3, 5, 5))
    B = rng.standard_normal((3, 5, 5))
    points = rng.uniform(0, 4, size=(20, 2))
    alpha, beta = 0.7, -1.3
    lhs, _ = bilinear_sample_forward(alpha * A + beta * B, points)
    ra, _ = bilinear_sample_forward(A, points)
    rb, _ = bilinear_sample_forward(B, points)
    np.testing.assert_allclose(lhs, alpha * ra + beta * rb, rtol=0, atol=1e-12)


def test_bilinear_origin_shift_matches_shifted_coords(rng):
    fmap = rng.standard_normal((2, 6, 6))
    offsets = rng.uniform(-1, 1, size=(4, 2))
    origin = np.array([[2, 3]] * 4)
    shifted, _ = bilinear_sample_forward(fmap, offsets, origin=origin)
    direct, _ = bilinear_sample_forward(fmap, offsets + origin)
    np.testing.assert_allclose(shifted, direct, rtol=0, atol=1e-14)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((3, 5, 4))
    y, _ = conv2d_forward(x, np.eye(3)[:, :, None, None])
    np.testing.assert_array_equal(y, x)


def test_conv_matches_direct_oracle(rng):
    x = rng.standard_normal((2, 6, 6))
    kernel = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    expected = np.zeros((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                acc = bias[o]
                for c in range(2):
                    for a in range(3):
                        for b in range(3):
                            acc += kernel[o, c, a, b] * xp[c, i + a, j + b]
                expected[o, i, j] = acc
    y, _ = conv2d_forward(x, kernel, bias)
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-13)


def test_conv_rejects_other_kernel_sizes():
    with pytest.raises(DimensionError):
        conv2d_forward(np.ones((1, 4, 4)), np.ones((1, 1, 5, 5)))


def test_pool_and_upsample_preserve_constants():
    x = np.full((2, 8, 8), 3.25)
    np.testing.assert_array_equal(avgpool2(x), np.full((2, 4, 4), 3.25))
    np.testing.assert_array_equal(upsample_nearest(x, 2), np.full((2, 16, 16), 3.25))


def test_avgpool_odd_dims_raise():
    with pytest.raises(DimensionError, match="not divisible"):
        avgpool_forward(np.ones((1, 5, 4)), 2)


def test_avgpool_backward_spreads_evenly():
    dx = avgpool_backward(np.ones((1, 2, 2)), 2)
    np.testing.assert_array_equal(dx, np.full((1, 4, 4), 0.25))


def test_layer_norm_normalizes_last_axis(rng):
    x = rng.standard_normal((5, 8)) * 3 + 1
    y, _ = layer_norm_forward(x, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_gelu_reference_values():
    y, _ = gelu_forward([0.0, 1.0, -1.0])
    np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


def test_bce_zero_logits_is_ln2():
    loss, _ = bce_with_logits_forward(np.zeros((3, 4)), np.eye(3, 4))
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_bce_saturated_logits_stay_finite():
    targets = np.array([1.0, 0.0, 1.0])
    loss, _ = bce_with_logits_forward(np.array([800.0, -800.0, 800.0]), targets)
    assert math.isfinite(loss) and loss < 1e-3


def test_check_finite_names_index():
    x = np.zeros((2, 3))
    x[1, 2] = np.nan
    with pytest.raises(NumericError, match=r"\(1, 2\)"):
        check_finite("x", x)


def test_tensor_header_layout():
    blob = encode_tensor(np.array([[1.0, 2.0]]))
    assert blob[:12] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    np.testing.assert_array_equal(decode_tensor(blob), [[1.0, 2.0]])


def test_truncated_tensor_is_rejected():
    blob = encode_tensor(np.arange(6.0).reshape(2, 3))
    with pytest.raises(ValueError, match="payload"):
        decode_tensor(blob[:-8])


def test_checkpoint_directory(tmp_path, rng):
    arrays = [("a.W", rng.standard_normal((2, 3))), ("b", rng.standard_normal(4))]
    save_checkpoint(tmp_path / "ck", arrays, {"epoch": 3})
    manifest, loaded = load_checkpoint(tmp_path / "ck")
    assert manifest["epoch"] == 3 and manifest["arrays"] == ["a.W", "b"]
    for name, array in arrays:
        np.testing.assert_array_equal(loaded[name], array)
