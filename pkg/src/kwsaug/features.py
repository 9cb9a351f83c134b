"""Log-mel filterbank feature extraction.

30 ms Hann-windowed frames with 10 ms shift, magnitude-squared 512-point FFT,
40 triangular filters equally spaced on the HTK mel scale between 20 and
8000 Hz, natural log with an energy floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .errors import DataError, TooShortError


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window: int = 480          # 30 ms at 16 kHz
    hop: int = 160             # 10 ms
    fft_size: int = 512
    n_mels: int = 40
    fmin: float = 20.0
    fmax: float = 8000.0
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.window > self.fft_size:
            raise DataError(f"window {self.window} exceeds FFT size {self.fft_size}")
        if self.hop > self.window:
            raise DataError(f"hop {self.hop} exceeds window {self.window}")

    @property
    def frame_length_ms(self) -> float:
        return 1000.0 * self.window / self.sample_rate

    @property
    def frame_shift_ms(self) -> float:
        return 1000.0 * self.hop / self.sample_rate


@dataclass
class FeatureMatrix:
    """T x n_mels log-mel energies (float32), one row per 10 ms frame."""

    frames: np.ndarray
    frame_length_ms: float = 30.0
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"feature matrix must be (T>=1, n_mels), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(cfg: FrontendConfig) -> np.ndarray:
    """Center frequencies (Hz) of the n_mels triangular filters."""
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """(n_mels, fft_size//2 + 1) triangular weights, peak 1, built in mel space."""
    n_bins = cfg.fft_size // 2 + 1
    bin_mels = hz_to_mel(np.arange(n_bins) * cfg.sample_rate / cfg.fft_size)
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_mels - lo) / (center - lo)
        falling = (hi - bin_mels) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    return (n_samples - cfg.window) // cfg.hop + 1


def log_mel(audio: AudioBuffer, cfg: FrontendConfig) -> FeatureMatrix:
    """Featurize one utterance; requires at least one full analysis window."""
    x = audio.samples
    if audio.sample_rate != cfg.sample_rate:
        raise DataError(f"audio sample rate {audio.sample_rate} != frontend rate {cfg.sample_rate}")
    if x.size < cfg.window:
        raise TooShortError(f"audio has {x.size} samples, below one {cfg.window}-sample window")
    n_frames = frame_count(x.size, cfg)
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.window)[None, :]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.window) / cfg.window)
    frames = x[idx] * window
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energy = power @ mel_filterbank(cfg).T
    return FeatureMatrix(np.log(np.maximum(energy, cfg.log_floor)).astype(np.float32),
                         cfg.frame_length_ms, cfg.frame_shift_ms)
