import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rotshield.attacks import worst_case_perturbation
from rotshield.defense import (
    DefenseConfig,
    ProtectedLayer,
    build_rotation,
    calibrate,
    correction_flop_ratio,
    default_tolerance,
    flop_overhead,
    fuse_weights,
    protected_forward,
    relative_linf_deviation,
    verify_lossless,
)
from rotshield.linalg import CompactWY, apply_wy_right, householder_from_outlier, uniform_direction, wy_to_dense
from rotshield.outliers import ChannelStats, channel_linf, compute_threshold
from rotshield.quant import quantize


def spiked(tokens, d, channels, magnitude=6.0, background=0.1, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-background, background, (tokens, d))
    for k in channels:
        x[0, k] = magnitude
    return x


def stats_for(d, channels):
    peaks = np.full(d, 0.1)
    peaks[list(channels)] = 1000.0
    return ChannelStats(peaks, 0.0, 0.0, 6.0, 1.0, tuple(channels))


def test_config_validation_and_cap():
    with pytest.raises(ValueError):
        DefenseConfig(alpha=-1)
    with pytest.raises(ValueError):
        DefenseConfig(m_max=-1)
    with pytest.raises(ValueError):
        DefenseConfig(lossless_tol=0)
    assert DefenseConfig().cap(256) == 3
    assert DefenseConfig().cap(100) == 1
    assert DefenseConfig(m_max=7).cap(256) == 7


def test_calibrate_floor_gives_no_outliers():
    x = np.random.default_rng(0).uniform(-0.9, 0.9, (50, 32))
    stats = calibrate({0: x, 1: [x[:20], x[20:]]})
    assert stats[0].outliers == () and stats[1].outliers == ()
    np.testing.assert_array_equal(stats[1].peaks, stats[0].peaks)


def test_calibrate_flags_planted_spike():
    stats = calibrate({"fc": spiked(64, 100, [17])})
    assert stats["fc"].outliers == (17,)


def test_calibrate_missing_layer_is_named():
    with pytest.raises(KeyError, match="layer7"):
        calibrate({"layer0": np.ones((2, 2))}, layers=["layer0", "layer7"])


def test_calibrate_truncates_to_cap():
    x = spiked(16, 256, [3, 9, 40], magnitude=30.0)
    x[1, 9] = 45.0
    stats = calibrate({0: x}, DefenseConfig(m_max=1))[0]
    assert stats.outliers == (9,)
    assert stats.dropped == (3, 40)


def test_alpha_sweep_counts_do_not_decrease():
    x = np.abs(np.random.default_rng(1).standard_cauchy((64, 256)))
    counts = [len(calibrate({0: x}, DefenseConfig(alpha=a, m_max=256))[0].outliers) for a in (9, 6, 3)]
    assert counts == sorted(counts)


def test_build_rotation_cases():
    assert build_rotation(stats_for(64, [])).m == 0
    wy = build_rotation(stats_for(64, [5]))
    np.testing.assert_allclose(wy_to_dense(wy), householder_from_outlier(64, 5).dense(), atol=1e-14)
    wy = build_rotation(stats_for(64, [20, 2, 11]))
    assert wy.protected_channels == (2, 11, 20)
    dense = np.eye(64)
    for k in (2, 11, 20):
        dense = dense @ householder_from_outlier(64, k).dense()
    assert np.max(np.abs(wy_to_dense(wy) - dense)) <= 1e-12


def test_fuse_identity_keeps_weights_bit_exact():
    q = quantize(np.random.default_rng(2).standard_normal((16, 8)))
    layer = fuse_weights(q, CompactWY.empty(16), DefenseConfig(requantize_fused=True))
    assert layer.fused_weights is q
    assert layer.original_scale_info["scale_mode"] == "per_row"


def test_fuse_full_precision_reconstructs():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((64, 24))
    wy = build_rotation(stats_for(64, [1, 30]))
    layer = fuse_weights(w, wy)
    assert np.max(np.abs(wy_to_dense(wy) @ layer.fused_weights - w)) <= 1e-9 * np.max(np.abs(w))


def test_fuse_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        fuse_weights(np.ones((5, 3)), CompactWY.empty(4))
    with pytest.raises(ValueError):
        ProtectedLayer(np.ones((5, 3)), CompactWY.empty(4))


@pytest.mark.parametrize("seed", range(5))
def test_requantized_fusion_within_tolerance(seed):
    rng = np.random.default_rng(seed)
    q = quantize(rng.standard_normal((64, 64)) / 8)
    layer = fuse_weights(q, build_rotation(stats_for(64, [7])), DefenseConfig(requantize_fused=True))
    assert layer.fused_weights.dtype == "int8"
    x = spiked(32, 64, [7], magnitude=32.0, background=1.0, seed=seed)
    rep = verify_lossless(q, layer, x)
    assert rep.tol == pytest.approx(2 * float(layer.fused_weights.scale.max()) * 64)
    assert rep.passed


def test_protected_forward_identity_is_bit_exact():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((9, 12)), rng.standard_normal((12, 5))
    y = protected_forward(x, fuse_weights(w, CompactWY.empty(12)))
    assert y.tobytes() == (x @ w).tobytes()


def test_protected_forward_full_precision_is_lossless():
    rng = np.random.default_rng(5)
    x, w = spiked(40, 48, [4, 33], 20.0, 1.0), rng.standard_normal((48, 6))
    layer = fuse_weights(w, build_rotation(stats_for(48, [4, 33])))
    assert relative_linf_deviation(protected_forward(x, layer), x @ w) <= 1e-9


def test_protected_forward_dimension_check():
    with pytest.raises(ValueError, match="dimension mismatch"):
        protected_forward(np.ones((2, 3)), fuse_weights(np.ones((4, 2)), CompactWY.empty(4)))


def test_rotation_smooths_dominant_spike():
    x = spiked(32, 128, [9], magnitude=32.0, background=1.0)
    xr = apply_wy_right(x, build_rotation(stats_for(128, [9])))
    assert np.max(np.abs(xr)) < np.max(np.abs(x))


def test_single_reflector_outlier_column_is_x_times_u():
    x = spiked(16, 64, [21], magnitude=40.0, background=1.0)
    xr = apply_wy_right(x, build_rotation(stats_for(64, [21])))
    assert np.max(np.abs(xr[:, 21] - x @ uniform_direction(64))) <= 1e-12


def test_verify_lossless_cases():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((256, 16))
    x = rng.standard_normal((20, 256))
    rep = verify_lossless(w, fuse_weights(w, CompactWY.empty(256)), x)
    assert rep.deviation == 0.0 and rep.passed
    chans = [int(c) for c in rng.choice(256, 8, replace=False)]
    rep = verify_lossless(w, fuse_weights(w, build_rotation(stats_for(256, chans))), x)
    assert rep.deviation <= 1e-9 and rep.tol == 1e-9
    broken = ProtectedLayer(w + 1.0, CompactWY.empty(256))
    assert not verify_lossless(w, broken, x).passed
    with pytest.raises(ValueError, match="shape mismatch"):
        verify_lossless(w[:, :3], broken, x)


def test_default_tolerance_prefers_config():
    layer = fuse_weights(np.ones((4, 2)), CompactWY.empty(4))
    assert default_tolerance(layer, DefenseConfig(lossless_tol=1e-3)) == 1e-3
    assert default_tolerance(layer) == 1e-9


def test_flop_ratio_cases():
    assert correction_flop_ratio(64, 64, 0, 5) == 0.0
    assert correction_flop_ratio(4096, 4096, 16, 1) < 0.01
    # frozen: (2*4096*16*2 + 2*16^2) / (2*4096^2)
    assert correction_flop_ratio(4096, 4096, 16, 1) == pytest.approx(0.0078277587890625, rel=1e-15)
    layer = fuse_weights(np.ones((64, 32)), build_rotation(stats_for(64, [3])))
    assert flop_overhead(layer, 8) == correction_flop_ratio(64, 32, 1)


@settings(max_examples=50, deadline=None)
@given(d_in=st.integers(1, 8192), d_out=st.integers(1, 8192), m=st.integers(0, 64),
       b1=st.integers(1, 4096), b2=st.integers(1, 4096))
def test_flop_ratio_independent_of_batch(d_in, d_out, m, b1, b2):
    assert correction_flop_ratio(d_in, d_out, m, b1) == pytest.approx(correction_flop_ratio(d_in, d_out, m, b2),
                                                                       rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.sampled_from([16, 64, 200]), alpha=st.floats(0.5, 12))
def test_end_to_end_losslessness_full_precision(seed, d, alpha):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((24, d))
    x[:, rng.integers(d)] *= 30.0
    w = rng.standard_normal((d, 10))
    cfg = DefenseConfig(alpha=alpha, m_max=8)
    stats = calibrate({0: x}, cfg)[0]
    layer = fuse_weights(w, build_rotation(stats), cfg)
    assert relative_linf_deviation(protected_forward(x, layer), x @ w) <= 1e-9


def test_worst_case_reduction_factor_on_spiked_layer():
    d, magnitude, background = 128, 32.0, 1.0
    rng = np.random.default_rng(7)
    q = quantize(rng.standard_normal((d, 16)) / np.sqrt(d))
    x = rng.uniform(-background, background, (64, d))
    x[5, 3] = magnitude
    base = fuse_weights(q, CompactWY.empty(d))
    prot = fuse_weights(q, build_rotation(compute_threshold(channel_linf(x))),
                        DefenseConfig(requantize_fused=True))
    assert prot.m == 1
    b, _ = worst_case_perturbation(base, x)
    p, _ = worst_case_perturbation(prot, x)
    assert b / p >= magnitude / (2 * background * np.sqrt(d))
