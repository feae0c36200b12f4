import numpy as np
import pytest
from scipy import stats

from vmoge.spectral import relative_band_power
from vmoge.synthgen import SynthConfig, generate_dataset, pink_noise


def test_counts_and_shapes():
    recs, man = generate_dataset(SynthConfig(subjects_per_class=4, duration=2.0))
    assert len(recs) == 8 and [r.label for r in recs] == [0] * 4 + [1] * 4
    assert recs[0].data.shape == (19, 256)
    assert len(man["subjects"]) == 8 and man["target_band"] == "alpha"


def test_deterministic_and_seed_sensitive():
    a, _ = generate_dataset(SynthConfig(subjects_per_class=2, duration=2.0, seed=1))
    b, _ = generate_dataset(SynthConfig(subjects_per_class=2, duration=2.0, seed=1))
    c, _ = generate_dataset(SynthConfig(subjects_per_class=2, duration=2.0, seed=2))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert not np.allclose(a[0].data, c[0].data)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(effect_size=0.5)
    with pytest.raises(ValueError):
        SynthConfig(target_band="gamma")
    with pytest.raises(ValueError):
        SynthConfig(channels=4, target_channels=(5,))


def test_pink_noise_unit_variance():
    x = pink_noise(np.random.default_rng(0), (3, 1024), 128.0)
    assert np.allclose(x.std(axis=-1), 1.0)


def _target_rbp(band):
    cfg = SynthConfig(target_band=band, duration=4.0, seed=0)
    recs, _ = generate_dataset(cfg)
    rbp = np.array([relative_band_power(r.data, r.fs) for r in recs])  # (S, 4, C)
    y = np.array([r.label for r in recs])
    tgt = rbp[:, :, list(cfg.target_channels)].mean(axis=2)
    other = rbp[:, :, 6:].mean(axis=2)
    return tgt, other, y, cfg.band_index


@pytest.mark.parametrize("band", ["delta", "theta", "alpha", "beta"])
def test_effect_in_target_band_only(band):
    tgt, other, y, k = _target_rbp(band)
    assert stats.mannwhitneyu(tgt[y == 1, k], tgt[y == 0, k], alternative="greater").pvalue < 0.01
    # the untouched channels carry no class signal in the target band
    assert stats.mannwhitneyu(other[y == 1, k], other[y == 0, k]).pvalue > 0.05


def test_null_effect_has_no_signal():
    recs, _ = generate_dataset(SynthConfig(effect_size=1.0, duration=4.0, seed=4))
    rbp = np.array([relative_band_power(r.data, r.fs).mean(axis=1) for r in recs])
    y = np.array([r.label for r in recs])
    for k in range(4):
        assert stats.mannwhitneyu(rbp[y == 1, k], rbp[y == 0, k]).pvalue > 0.01
