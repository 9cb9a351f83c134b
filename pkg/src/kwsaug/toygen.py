"""Synthetic desk-scale corpus: tone "keywords", chirp fillers, noise files.

Each target word is a harmonic tone at a word-specific base frequency with
per-clip jitter in frequency, amplitude, onset, and duration, so classes are
separable but not degenerate. Filler words are frequency sweeps and land in
the unknown class; background noise files supply both corruption noise and
silence examples.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav
from .data import BACKGROUND_DIR

TOY_TARGETS = ("yes", "no", "up", "down")
TOY_FILLERS = ("bird", "tree")
_BASE_HZ = (400.0, 700.0, 1200.0, 2000.0, 2800.0, 520.0, 900.0, 1500.0, 2400.0, 3200.0)


def _tone_clip(rng: np.random.Generator, base_hz: float, sample_rate: int) -> np.ndarray:
    # two-segment tone (frequency steps up mid-clip): classes stay separable by
    # the base frequency while the temporal structure makes time warps matter
    n = sample_rate
    t = np.arange(n) / sample_rate
    f1 = base_hz * (1.0 + rng.uniform(-0.03, 0.03))
    f2 = 1.35 * base_hz * (1.0 + rng.uniform(-0.03, 0.03))
    split = rng.uniform(0.35, 0.65)
    freq = np.where(t < split, f1, f2)
    phase = rng.uniform(0.0, 2.0 * np.pi) + 2.0 * np.pi * np.cumsum(freq) / sample_rate
    amp = rng.uniform(0.25, 0.8)
    sig = np.sin(phase) + 0.3 * np.sin(2.0 * phase)
    onset = int(rng.uniform(0.0, 0.1) * n)
    env = np.zeros(n)
    ramp = max(1, int(0.01 * n))
    env[onset:] = 1.0
    env[onset:onset + ramp] = np.linspace(0, 1, ramp)
    env[n - ramp:] = np.linspace(1, 0, ramp)
    return amp * sig * env + 1e-3 * rng.standard_normal(n)


def _chirp_clip(rng: np.random.Generator, upward: bool, sample_rate: int) -> np.ndarray:
    n = sample_rate
    t = np.arange(n) / sample_rate
    f0, f1 = (300.0, 3000.0) if upward else (3000.0, 300.0)
    f0 *= 1.0 + rng.uniform(-0.05, 0.05)
    f1 *= 1.0 + rng.uniform(-0.05, 0.05)
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t)
    return rng.uniform(0.25, 0.7) * np.sin(phase) + 1e-3 * rng.standard_normal(n)


def _noise_clip(rng: np.random.Generator, kind: int, n: int) -> np.ndarray:
    white = rng.standard_normal(n)
    if kind % 2:
        # crude low-passed variant so the noise bank is not all-white
        kernel = np.ones(8) / 8.0
        white = np.convolve(white, kernel, mode="same")
    return 0.25 * white / max(np.max(np.abs(white)), 1e-9)


def generate(out_dir, clips_per_word: int = 60, targets: tuple[str, ...] = TOY_TARGETS,
             fillers: tuple[str, ...] = TOY_FILLERS, noise_files: int = 4,
             noise_seconds: float = 8.0, seed: int = 0, sample_rate: int = 16000) -> int:
    """Write the corpus tree under out_dir; returns the number of clips written."""
    out = Path(out_dir)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 987])
    count = 0
    for w, word in enumerate(targets):
        base = _BASE_HZ[w % len(_BASE_HZ)]
        (out / word).mkdir(parents=True, exist_ok=True)
        for k in range(clips_per_word):
            clip = _tone_clip(rng, base, sample_rate)
            write_wav(out / word / f"toy{k:04d}_nohash_0.wav",
                      AudioBuffer(clip, sample_rate))
            count += 1
    for w, word in enumerate(fillers):
        (out / word).mkdir(parents=True, exist_ok=True)
        for k in range(max(1, clips_per_word // 2)):
            clip = _chirp_clip(rng, upward=(w % 2 == 0), sample_rate=sample_rate)
            write_wav(out / word / f"toy{k:04d}_nohash_0.wav",
                      AudioBuffer(clip, sample_rate))
            count += 1
    noise_dir = out / BACKGROUND_DIR
    noise_dir.mkdir(parents=True, exist_ok=True)
    for k in range(noise_files):
        clip = _noise_clip(rng, k, int(noise_seconds * sample_rate))
        write_wav(noise_dir / f"noise{k}.wav", AudioBuffer(clip, sample_rate))
    return count
