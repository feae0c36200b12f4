"""Synthetic multichannel recordings with a class effect in one band.

Every channel is a sum of one random-phase oscillation per band plus a
1/f noise floor. For class-1 subjects the oscillation of the target band
is scaled by ``effect_size`` on the target channels.
"""
from dataclasses import dataclass

import numpy as np

from .spectral import BAND_NAMES, BANDS, RawRecording

# keeps tone centres away from band edges so Welch leakage stays in-band
EDGE_MARGIN_HZ = 0.5


@dataclass
class SynthConfig:
    subjects_per_class: int = 20
    fs: float = 128.0
    duration: float = 8.0
    channels: int = 19
    target_band: str = "alpha"
    target_channels: tuple = (0, 1, 2, 3, 4, 5)
    effect_size: float = 2.5
    noise_amplitude: float = 0.5
    seed: int = 0
    covariates: bool = True

    def __post_init__(self):
        if self.effect_size < 1:
            raise ValueError("effect_size must be >= 1")
        if self.target_band not in BAND_NAMES:
            raise ValueError(f"target_band must be one of {BAND_NAMES}")
        self.target_channels = tuple(int(c) for c in self.target_channels)
        if any(c < 0 or c >= self.channels for c in self.target_channels):
            raise ValueError("target channel index out of range")
        if self.subjects_per_class < 1:
            raise ValueError("need at least one subject per class")

    @property
    def band_index(self):
        return BAND_NAMES.index(self.target_band)


def pink_noise(rng, shape, fs):
    """Noise with power spectral density proportional to 1/f, unit variance."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n=n, axis=-1)
    x /= x.std(axis=-1, keepdims=True)
    return x


def subject_rng(seed, subject_number):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(subject_number)]))


def generate_subject(cfg, y, subject_seed, subject_id=None):
    rng = subject_rng(cfg.seed, subject_seed)
    T = int(round(cfg.duration * cfg.fs))
    t = np.arange(T) / cfg.fs
    x = cfg.noise_amplitude * pink_noise(rng, (cfg.channels, T), cfg.fs)
    for b, (lo, hi) in enumerate(BANDS):
        freq = rng.uniform(lo + EDGE_MARGIN_HZ, hi - EDGE_MARGIN_HZ, size=cfg.channels)
        phase = rng.uniform(0, 2 * np.pi, size=cfg.channels)
        amp = np.ones(cfg.channels)
        if y == 1 and b == cfg.band_index:
            amp[list(cfg.target_channels)] *= cfg.effect_size
        x += amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None])
    cov = {}
    if cfg.covariates:
        cov = {"age": float(rng.uniform(60, 85)), "score": float(np.clip(29 - 8 * y + rng.normal(0, 2), 0, 30))}
    sid = subject_id or f"s{subject_seed:03d}"
    return RawRecording(x, cfg.fs, sid, label=int(y), covariates=cov)


def generate_dataset(cfg):
    """Balanced cohort: returns (recordings, manifest)."""
    recs = []
    n = cfg.subjects_per_class
    for i in range(2 * n):
        y = 0 if i < n else 1
        recs.append(generate_subject(cfg, y, i, subject_id=f"sub-{i:03d}"))
    manifest = {
        "seed": cfg.seed,
        "fs": cfg.fs,
        "target_band": cfg.target_band,
        "effect_size": cfg.effect_size,
        "subjects": [{"id": r.subject, "label": r.label} for r in recs],
    }
    return recs, manifest
