import math

import numpy as np
import pytest

from models.fuser import (
    ConvFuserParams,
    DcaConfig,
    FeatureMap,
    FpConfig,
    attention_weights,
    check_aligned,
    conv_fuser_forward,
    dca_forward,
    ddca_backward,
    ddca_forward,
    fp_ddca_backward,
    fp_ddca_forward,
    identity_dca_params,
    init_dca_params,
    init_ddca_params,
    init_fp_params,
    stack_forward,
)
from models.numkit import conv2d_forward
from models.params import randomize
from utils.errors import ConfigError, DimensionError


def read_cell(fmap, r, c):
    C, H, W = fmap.shape
    if 0 <= r < H and 0 <= c < W:
        return fmap[:, r, c]
    return np.zeros(C)


def sample_point(fmap, pr, pc):
    r0, c0 = math.floor(pr), math.floor(pc)
    fr, fc = pr - r0, pc - c0
    return ((1 - fr) * (1 - fc) * read_cell(fmap, r0, c0) + (1 - fr) * fc * read_cell(fmap, r0, c0 + 1)
            + fr * (1 - fc) * read_cell(fmap, r0 + 1, c0) + fr * fc * read_cell(fmap, r0 + 1, c0 + 1))


def dca_oracle(p, query, kv):
    """Per-index transcription: one query cell, one head, one point at a time."""
    cfg = p.config
    C, rows, cols = query.shape
    H, N, hd = cfg.heads, cfg.points, cfg.head_dim
    out = np.zeros((C, rows, cols))
    for r in range(rows):
        for c in range(cols):
            z = query[:, r, c]
            concat = np.zeros(C)
            for h in range(H):
                logits = np.array([z @ p.W_att[:, h * N + n] + p.b_att[h * N + n] for n in range(N)])
                weights = np.exp(logits - logits.max())
                weights /= weights.sum()
                for n in range(N):
                    k = (h * N + n) * 2
                    dr = z @ p.W_off[:, k] + p.b_off[k]
                    dc = z @ p.W_off[:, k + 1] + p.b_off[k + 1]
                    sampled = sample_point(kv, r + dr, c + dc)
                    for d in range(hd):
                        value = sum(sampled[i] * p.W_val[h, i, d] for i in range(C)) + p.b_val[h, d]
                        concat[h * hd + d] += weights[n] * value
            out[:, r, c] = concat @ p.W_out + p.b_out
    return out


def test_offset_width_for_reference_setting():
    assert DcaConfig(channels=256, heads=8, points=32).offset_width == 512


def test_heads_must_divide_channels():
    with pytest.raises(ConfigError, match="divisible"):
        DcaConfig(channels=6, heads=4, points=2)


def random_dca_config(rng):
    heads = int(rng.integers(1, 4))
    return DcaConfig(heads * int(rng.integers(1, 3)), heads, int(rng.integers(1, 5)))


def test_dca_matches_per_index_oracle(rng):
    params = randomize(init_dca_params(DcaConfig(4, 2, 3), rng), rng)
    query = rng.standard_normal((4, 5, 5))
    kv = rng.standard_normal((4, 5, 5))
    out, _ = dca_forward(params, query, kv)
    np.testing.assert_allclose(out, dca_oracle(params, query, kv), rtol=0, atol=1e-12)


@pytest.mark.slow
def test_dca_matches_per_index_oracle_on_random_configs(rng):
    for _ in range(100):
        config = random_dca_config(rng)
        shape = (config.channels, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        params = randomize(init_dca_params(config, rng), rng)
        query, kv = rng.standard_normal((2, *shape))
        out, _ = dca_forward(params, query, kv)
        np.testing.assert_allclose(out, dca_oracle(params, query, kv), rtol=0, atol=1e-12)


def test_attention_normalized_per_head(rng):
    for _ in range(1000):
        config = random_dca_config(rng)
        params = randomize(init_dca_params(config, rng), rng, scale=float(rng.uniform(0.1, 5.0)))
        rows, cols = rng.integers(1, 5, size=2)
        attn = attention_weights(params, rng.standard_normal((config.channels, rows, cols)))
        assert attn.shape == (rows * cols, config.heads, config.points)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_degenerate_dca_reads_kv_pointwise(rng):
    for _ in range(50):
        config = random_dca_config(rng)
        shape = (config.channels, int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        query, kv = rng.standard_normal((2, *shape))
        out, _ = dca_forward(identity_dca_params(config), query, kv)
        np.testing.assert_allclose(out, kv, rtol=0, atol=1e-12)


def test_dca_is_translation_equivariant_in_the_interior(rng):
    for _ in range(50):
        params = randomize(init_dca_params(DcaConfig(4, 2, 3), rng), rng)
        params.W_off[:] *= 0.02
        params.b_off[:] = np.clip(params.b_off, -0.4, 0.4)
        big_q, big_kv = rng.standard_normal((2, 4, 12, 12))
        offsets = big_q.reshape(4, -1).T @ params.W_off + params.b_off
        assert np.abs(offsets).max() < 1.0
        full, _ = dca_forward(params, big_q, big_kv)
        shifted, _ = dca_forward(params, big_q[:, 1:, 2:], big_kv[:, 1:, 2:])
        # offsets stay within one cell, so rows/cols 2.. keep every sample inside both maps
        np.testing.assert_allclose(shifted[:, 2:8, 2:7], full[:, 3:9, 4:9], rtol=0, atol=1e-12)


def test_misaligned_modalities_raise(rng):
    params = init_dca_params(DcaConfig(4, 2, 2), rng)
    with pytest.raises(DimensionError, match="axis 2"):
        dca_forward(params, np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))
    with pytest.raises(DimensionError, match="resolutions"):
        check_aligned(FeatureMap(np.zeros((4, 4, 4)), "radar", 0.4), FeatureMap(np.zeros((4, 4, 4)), "camera", 0.8))


def test_ddca_gradients_reach_both_modalities(rng):
    params = randomize(init_ddca_params(DcaConfig(4, 2, 2), rng), rng, scale=0.3)
    mod0, mod1 = rng.standard_normal((2, 4, 4, 4))
    out, cache = ddca_forward(params, mod0, mod1)
    assert out.shape == mod0.shape
    _, d0, d1 = ddca_backward(rng.standard_normal(out.shape), cache)
    assert np.linalg.norm(d0) > 0 and np.linalg.norm(d1) > 0


def test_degenerate_ddca_depends_on_both_inputs(rng):
    config = DcaConfig(4, 2, 2)
    params = init_ddca_params(config, rng)
    for sub in (params.pass1, params.pass2):
        sub.dca = identity_dca_params(config)
        sub.W_ffn2[:] = 0.0
    mod0, mod1 = rng.standard_normal((2, 4, 4, 4))
    out, cache = ddca_forward(params, mod0, mod1)
    assert np.all(np.isfinite(out))
    _, d0, d1 = ddca_backward(rng.standard_normal(out.shape), cache)
    assert np.linalg.norm(d0) > 0 and np.linalg.norm(d1) > 0


def test_depth_one_pyramid_is_stack_then_conv(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=1, blocks_per_scale=2)
    params = randomize(init_fp_params(config, rng, (4, 4)), rng, scale=0.3)
    radar, camera = rng.standard_normal((2, 4, 4, 4))
    out, _ = fp_ddca_forward(params, radar, camera, "RC")
    fused, _ = stack_forward(params.stacks[0], radar, camera)
    expected, _ = conv2d_forward(fused, params.final_kernel, params.final_bias)
    np.testing.assert_array_equal(out, expected)


def test_order_swaps_modalities(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=1, blocks_per_scale=1)
    params = randomize(init_fp_params(config, rng, (4, 4)), rng, scale=0.3)
    radar, camera = rng.standard_normal((2, 4, 4, 4))
    rc, _ = fp_ddca_forward(params, radar, camera, "RC")
    cr, _ = fp_ddca_forward(params, camera, radar, "CR")
    np.testing.assert_array_equal(rc, cr)


def test_pyramid_gradients_per_modality(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=3, blocks_per_scale=1, merge="concat")
    params = randomize(init_fp_params(config, rng, (8, 8)), rng, scale=0.3)
    radar, camera = rng.standard_normal((2, 4, 8, 8))
    out, cache = fp_ddca_forward(params, radar, camera, "CR")
    grads, dradar, dcamera = fp_ddca_backward(rng.standard_normal(out.shape), cache)
    assert dradar.shape == radar.shape and dcamera.shape == camera.shape
    assert np.linalg.norm(dradar) > 0 and np.linalg.norm(dcamera) > 0
    assert grads.final_kernel.shape == (4, 12, 3, 3)


def test_zero_radar_gives_finite_output(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=2, blocks_per_scale=1)
    params = init_fp_params(config, rng, (8, 8))
    out, _ = fp_ddca_forward(params, np.zeros((4, 8, 8)), rng.standard_normal((4, 8, 8)))
    assert out.shape == (4, 8, 8)
    assert np.all(np.isfinite(out))


def test_pyramid_grid_must_divide(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=3)
    with pytest.raises(DimensionError, match="divisible"):
        init_fp_params(config, rng, (6, 8))
    literal = FpConfig(DcaConfig(4, 2, 2), layers=3, scale_mode="literal")
    assert literal.scales == (1, 2, 3) and literal.grid_multiple == 6
    init_fp_params(literal, rng, (6, 12))


def test_conv_fuser_passes_radar_through_identity_kernel(rng):
    C = 3
    kernel = np.zeros((C, 2 * C, 3, 3))
    for o in range(C):
        kernel[o, o, 1, 1] = 1.0
    params = ConvFuserParams(kernel, np.zeros(C))
    radar = rng.standard_normal((C, 5, 6))
    out, _ = conv_fuser_forward(params, radar, np.zeros((C, 5, 6)))
    np.testing.assert_array_equal(out, radar)


def test_invalid_pyramid_settings():
    with pytest.raises(ConfigError):
        FpConfig(DcaConfig(4, 2, 2), layers=4)
    with pytest.raises(ConfigError):
        FpConfig(DcaConfig(4, 2, 2), merge="max")
