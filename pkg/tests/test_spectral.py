import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmoge.spectral import (
    BANDS, RawRecording, band_decompose, bandpass_filter, epoch_split, featurize_epoch,
    relative_band_power, welch_psd,
)

FS = 256.0


def bandwidth_fractions():
    lo, hi = BANDS[0][0], BANDS[-1][1]
    return np.array([(b - a) / (hi - lo) for a, b in BANDS])


def test_bandwidth_fractions_oracle():
    assert np.allclose(bandwidth_fractions(), [0.0787, 0.0899, 0.1124, 0.7191], atol=1e-4)


def test_epoch_split_counts():
    rec = RawRecording(np.zeros((3, 5000)), 500.0, "s")
    eps = epoch_split(rec, 4.0)
    assert len(eps) == 2 and eps[0].shape == (3, 2000)


def test_epoch_split_short_warns():
    rec = RawRecording(np.zeros((2, 100)), 100.0, "s")
    with pytest.warns(UserWarning):
        assert epoch_split(rec, 4.0) == []


def test_recording_rejects_nonfinite():
    with pytest.raises(ValueError):
        RawRecording(np.array([[0.0, np.nan]]), 100.0, "s")
    with pytest.raises(ValueError):
        RawRecording(np.zeros((1, 4)), 0.0, "s")


@settings(max_examples=200)
@given(seed=st.integers(0, 2**31 - 1), C=st.integers(1, 6))
def test_rbp_columns_sum_to_one(seed, C):
    x = np.random.default_rng(seed).normal(size=(C, 512)) * 10
    rbp = relative_band_power(x, FS)
    assert rbp.shape == (4, C)
    assert np.all((rbp >= 0) & (rbp <= 1))
    assert np.allclose(rbp.sum(axis=0), 1.0, atol=1e-9, rtol=0)


def test_alpha_sinusoid():
    t = np.arange(1024) / FS
    rbp = relative_band_power(np.sin(2 * np.pi * 10 * t)[None], FS)
    assert rbp[2, 0] > 0.99


def test_white_noise_matches_bandwidth():
    rng = np.random.default_rng(0)
    rbp = np.mean([relative_band_power(rng.normal(size=(1, 1024)), FS)[:, 0] for _ in range(100)], axis=0)
    assert np.allclose(rbp, bandwidth_fractions(), atol=0.02)


def test_dead_channel_uniform():
    x = np.zeros((2, 512))
    x[0] = np.random.default_rng(1).normal(size=512)
    with pytest.warns(UserWarning):
        rbp = relative_band_power(x, FS)
    assert np.allclose(rbp[:, 1], 0.25)


def test_low_fs_rejected():
    with pytest.raises(ValueError):
        relative_band_power(np.ones((1, 200)), 90.0)


def test_welch_clamps_long_segment():
    x = np.random.default_rng(0).normal(size=100)
    with pytest.warns(UserWarning):
        f, p = welch_psd(x, 100.0, nperseg=400)
    assert f.size == 51


def test_welch_matches_periodogram_power():
    # Parseval: integrated density equals the variance for white noise (on average)
    x = np.random.default_rng(3).normal(size=(50, 2048))
    f, p = welch_psd(x, FS)
    assert np.mean(p.sum(axis=1) * (f[1] - f[0])) == pytest.approx(1.0, rel=0.05)


def test_bandpass_keeps_inband_tone_only():
    t = np.arange(512) / FS
    x = np.sin(2 * np.pi * 10 * t) + np.sin(2 * np.pi * 30 * t)
    y = bandpass_filter(x, FS, BANDS[2])
    assert np.allclose(y, np.sin(2 * np.pi * 10 * t), atol=1e-9)


def test_band_decompose_partitions_signal():
    x = np.random.default_rng(0).normal(size=(3, 512))
    parts = band_decompose(x, FS)
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(512, 1 / FS)
    spec[:, (f < 0.5) | (f >= 45)] = 0
    assert np.allclose(parts.sum(axis=0), np.fft.irfft(spec, n=512))


def test_featurize_epoch_shapes():
    bft = featurize_epoch(np.random.default_rng(0).normal(size=(5, 512)), FS, "s", 1, 3)
    assert bft.rbp.shape == (4, 5) and bft.filtered.shape == (4, 5, 512)
    assert bft.label == 1 and bft.epoch_index == 3
