"""Preprocessing, augmentation filters and the log-mel feature frontend."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from scipy import signal as sps

from .signal_io import EcgRecord

WORKING_RATE_HZ = 1000


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 128
    hop: int = 50
    window: str = "hann"
    n_mel: int = 48
    f_min_hz: float = 0.5
    f_max_hz: float = 250.0

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"need 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if self.window.lower() != "hann":
            raise ValueError(f"unsupported window {self.window!r}; only 'hann'")
        if self.n_mel < 1:
            raise ValueError("n_mel must be >= 1")
        if not 0 <= self.f_min_hz < self.f_max_hz:
            raise ValueError("need 0 <= f_min_hz < f_max_hz")

    def check_rate(self, sampling_rate_hz: float) -> None:
        if self.f_max_hz > sampling_rate_hz / 2:
            raise ValueError(f"f_max_hz={self.f_max_hz} above Nyquist of {sampling_rate_hz} Hz")

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop)


@dataclass(frozen=True)
class AugmentConfig:
    bandpass_prob: float = 0.5
    notch_prob: float = 0.5
    bandpass_low_hz: float = 0.5
    bandpass_high_hz: float = 40.0
    notch_hz: float = 50.0
    notch_q: float = 30.0
    seed: int = 0

    def __post_init__(self):
        for name in ("bandpass_prob", "notch_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not 0 < self.bandpass_low_hz < self.bandpass_high_hz:
            raise ValueError("need 0 < bandpass_low_hz < bandpass_high_hz")
        if self.notch_hz <= 0 or self.notch_q <= 0:
            raise ValueError("notch_hz and notch_q must be positive")


class ZScoreResult(NamedTuple):
    values: np.ndarray
    degenerate: np.ndarray | bool


# ---------------------------------------------------------------------------
# preprocessing


def resample(x: np.ndarray, from_hz: int, to_hz: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling along the last axis.

    Output length is ``round(N * to_hz / from_hz)``.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if from_hz == to_hz:
        return x.copy()
    ratio = Fraction(int(to_hz), int(from_hz))
    n_out = int(round(x.shape[-1] * to_hz / from_hz))
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1, window=("kaiser", 5.0))
    if y.shape[-1] < n_out:
        pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
        y = np.pad(y, pad, mode="edge")
    return y[..., :n_out]


def zscore(x: np.ndarray) -> ZScoreResult:
    """Standardize each lead (last axis) with the population std.

    A lead with zero spread maps to zeros and is flagged as degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("zscore needs at least two samples")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=-1, keepdims=True))
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    safe = np.where(degenerate, 1.0, std)
    out = np.where(degenerate, 0.0, centered / safe)
    flags = degenerate[..., 0]
    return ZScoreResult(out, bool(flags) if flags.ndim == 0 else flags)


def _check_band(freq_hz: float, sampling_rate_hz: float) -> None:
    if not 0 < freq_hz < sampling_rate_hz / 2:
        raise ValueError(f"frequency {freq_hz} Hz outside (0, Nyquist={sampling_rate_hz / 2})")


def bandpass_sos(low_hz: float, high_hz: float, sampling_rate_hz: float, order: int = 2) -> np.ndarray:
    _check_band(low_hz, sampling_rate_hz)
    _check_band(high_hz, sampling_rate_hz)
    if low_hz >= high_hz:
        raise ValueError("need low_hz < high_hz")
    return sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=sampling_rate_hz, output="sos")


def notch_sos(center_hz: float, q: float, sampling_rate_hz: float) -> np.ndarray:
    _check_band(center_hz, sampling_rate_hz)
    b, a = sps.iirnotch(center_hz, q, fs=sampling_rate_hz)
    return sps.tf2sos(b, a)


def _zero_phase(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    padlen = min(3 * (2 * sos.shape[0] + 1), x.shape[-1] - 1)
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=max(padlen, 0))


def bandpass(x: np.ndarray, low_hz: float, high_hz: float, sampling_rate_hz: float = WORKING_RATE_HZ) -> np.ndarray:
    """Forward-backward Butterworth band-pass (biquad cascade)."""
    return _zero_phase(bandpass_sos(low_hz, high_hz, sampling_rate_hz), x)


def notch(x: np.ndarray, center_hz: float, q: float, sampling_rate_hz: float = WORKING_RATE_HZ) -> np.ndarray:
    """Forward-backward second-order notch."""
    return _zero_phase(notch_sos(center_hz, q, sampling_rate_hz), x)


def augment(record: EcgRecord, config: AugmentConfig, rng: np.random.Generator) -> EcgRecord:
    """Band-pass with ``bandpass_prob``, then notch with ``notch_prob``.

    Both coin flips are always drawn so the generator advances identically
    whatever the outcome.
    """
    apply_bp, apply_notch = rng.random(2) < (config.bandpass_prob, config.notch_prob)
    if not (apply_bp or apply_notch):
        return record
    x = record.samples.astype(np.float64)
    fs = record.sampling_rate_hz
    if apply_bp:
        x = bandpass(x, config.bandpass_low_hz, config.bandpass_high_hz, fs)
    if apply_notch:
        x = notch(x, config.notch_hz, config.notch_q, fs)
    return record.with_samples(x)


# ---------------------------------------------------------------------------
# features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: StftConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mel + 2))
    return edges[1:-1]


def mel_filterbank(config: StftConfig, sampling_rate_hz: float) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``(n_mel, n_fft // 2 + 1)``."""
    config.check_rate(sampling_rate_hz)
    fft_freqs = np.fft.rfftfreq(config.n_fft, d=1.0 / sampling_rate_hz)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mel + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrogram(x: np.ndarray, config: StftConfig) -> np.ndarray:
    """Hann-windowed STFT power, frames at ``k * hop``, final frames zero-padded."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_frames = config.n_frames(n)
    padded = np.zeros((n_frames - 1) * config.hop + config.n_fft)
    padded[:n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.n_fft)[:: config.hop][:n_frames]
    window = sps.get_window("hann", config.n_fft, fftbins=True)
    spec = np.fft.rfft(frames * window, axis=-1)
    return (spec.real**2 + spec.imag**2).T


def mel_spectrogram(x: np.ndarray, sampling_rate_hz: float, config: StftConfig) -> np.ndarray:
    """Log-compressed mel energies ``log(1 + mel_power)``, shape ``(n_mel, ceil(N / hop))``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("mel_spectrogram expects one lead")
    if x.shape[0] < config.n_fft:
        raise ValueError(f"signal of {x.shape[0]} samples shorter than n_fft={config.n_fft}")
    fbank = mel_filterbank(config, sampling_rate_hz)
    return np.log1p(fbank @ power_spectrogram(x, config))


def record_features(record: EcgRecord, config: StftConfig, n_samples: int | None = None,
                    target_hz: int = WORKING_RATE_HZ) -> np.ndarray:
    """Resample, z-score and log-mel every lead; returns ``(L, n_mel, F)`` float32.

    When ``n_samples`` is given the standardized signal is zero-padded or
    cropped to that length first, fixing the frame count.
    """
    x = record.samples.astype(np.float64)
    if record.sampling_rate_hz != target_hz:
        x = resample(x, record.sampling_rate_hz, target_hz)
    x = zscore(x).values
    if n_samples is not None:
        if x.shape[-1] < n_samples:
            x = np.pad(x, ((0, 0), (0, n_samples - x.shape[-1])))
        x = x[:, :n_samples]
    return np.stack([mel_spectrogram(lead, target_hz, config) for lead in x]).astype(np.float32)
