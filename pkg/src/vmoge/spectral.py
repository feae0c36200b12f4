"""Epoching, Welch spectra, relative band power and FFT band decomposition."""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import welch

BAND_NAMES = ("delta", "theta", "alpha", "beta")
BANDS = ((0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 45.0))
ANALYSIS_RANGE = (0.5, 45.0)


@dataclass
class RawRecording:
    data: np.ndarray  # (C, T)
    fs: float
    subject: str
    label: int | None = None
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.fs <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"recording {self.subject!r} contains non-finite samples")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]


@dataclass
class BandFeatureTensor:
    rbp: np.ndarray  # (B, C)
    filtered: np.ndarray  # (B, C, T')
    fs: float
    label: int | None = None
    subject: str = ""
    epoch_index: int = 0
    adjacency: np.ndarray | None = None  # (B, C, C)


def epoch_length(fs, epoch_sec):
    return int(round(epoch_sec * fs))


def epoch_split(rec, epoch_sec=4.0):
    """Cut a recording into non-overlapping C x T' epochs; the tail is dropped."""
    n = epoch_length(rec.fs, epoch_sec)
    if n < 2:
        raise ValueError(f"epoch of {epoch_sec} s at {rec.fs} Hz has fewer than 2 samples")
    count = rec.n_samples // n
    if count == 0:
        warnings.warn(
            f"recording {rec.subject!r} has {rec.n_samples} samples, shorter than one epoch ({n})"
        )
        return []
    return [rec.data[:, i * n : (i + 1) * n] for i in range(count)]


def welch_psd(x, fs, nperseg=None, overlap=0.5):
    """One-sided Welch density with a Hann window.

    ``nperseg`` defaults to min(2 fs, len(x)); values longer than the
    signal are clamped with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if nperseg is None:
        nperseg = min(int(2 * fs), T)
    if nperseg > T:
        warnings.warn(f"nperseg={nperseg} exceeds signal length {T}; clamped")
        nperseg = T
    noverlap = int(np.floor(overlap * nperseg))
    return welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=noverlap,
                 scaling="density", axis=-1)


def band_masks(freqs, bands=BANDS):
    return [(freqs >= lo) & (freqs < hi) for lo, hi in bands]


def relative_band_power(epoch, fs, bands=BANDS, nperseg=None, overlap=0.5):
    """B x C matrix of band power divided by total power over the analysis range."""
    epoch = np.atleast_2d(epoch)
    if fs <= 2 * ANALYSIS_RANGE[1]:
        raise ValueError(f"fs={fs} Hz puts {ANALYSIS_RANGE[1]} Hz at or above Nyquist")
    freqs, psd = welch_psd(epoch, fs, nperseg, overlap)
    df = freqs[1] - freqs[0]
    power = np.stack([psd[:, m].sum(axis=1) * df for m in band_masks(freqs, bands)])
    total = power.sum(axis=0)
    dead = total <= 0
    if np.any(dead):
        warnings.warn(f"zero total power in channels {np.flatnonzero(dead).tolist()}; rbp set uniform")
    out = np.empty_like(power)
    out[:, ~dead] = power[:, ~dead] / total[~dead]
    out[:, dead] = 1.0 / len(bands)
    return out


def bandpass_filter(x, fs, band):
    """Zero every FFT bin whose frequency lies outside [lo, hi)."""
    lo, hi = band
    if not 0 < lo < hi <= fs / 2:
        raise ValueError(f"band {band} not inside (0, {fs / 2}) Hz")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[..., (f < lo) | (f >= hi)] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def band_decompose(epoch, fs, bands=BANDS):
    """(C, T') epoch -> (B, C, T') stack of band-limited signals."""
    return np.stack([bandpass_filter(epoch, fs, b) for b in bands])


def featurize_epoch(epoch, fs, subject="", label=None, epoch_index=0, nperseg=None, overlap=0.5):
    return BandFeatureTensor(
        rbp=relative_band_power(epoch, fs, nperseg=nperseg, overlap=overlap),
        filtered=band_decompose(epoch, fs),
        fs=fs,
        label=label,
        subject=subject,
        epoch_index=epoch_index,
    )
