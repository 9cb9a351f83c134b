"""Speed and volume perturbation of waveforms and unsupervised pair construction.

Speed perturbation is pure time-axis scaling (pitch shifts with speed) via
linear interpolation; volume perturbation is a plain amplitude scaling with
no clipping in the float domain. A pair canvasses both waveforms to a fixed
length by front-padding (or front-truncating) so the utterance always ends at
the final frame, then featurizes both members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .errors import TooShortError
from .features import FeatureMatrix, FrontendConfig, log_mel


@dataclass(frozen=True)
class AugmentSpec:
    speed_range: tuple[float, float] = (0.8, 1.2)
    volume_range: tuple[float, float] = (0.5, 1.5)
    canvas_seconds: float = 1.25

    def __post_init__(self):
        for name, (lo, hi) in (("speed_range", self.speed_range), ("volume_range", self.volume_range)):
            if not (0.0 < lo <= 1.0 <= hi):
                raise ValueError(f"{name} must be a positive interval containing 1, got ({lo}, {hi})")
        if self.canvas_seconds <= 0:
            raise ValueError(f"canvas_seconds must be positive, got {self.canvas_seconds}")

    def canvas_samples(self, sample_rate: int) -> int:
        return int(round(self.canvas_seconds * sample_rate))


@dataclass
class FeaturePair:
    """Features of one utterance and its perturbed twin, plus the drawn ratios."""

    original: FeatureMatrix
    augmented: FeatureMatrix
    speed: float
    volume: float


def volume_perturb(audio: AudioBuffer, ratio: float) -> AudioBuffer:
    if ratio <= 0:
        raise ValueError(f"volume ratio must be positive, got {ratio}")
    return AudioBuffer(audio.samples * ratio, audio.sample_rate)


def speed_perturb(audio: AudioBuffer, ratio: float) -> AudioBuffer:
    """Resample to realize a time-axis scaling by `ratio` (>1 means faster/shorter)."""
    if ratio <= 0:
        raise ValueError(f"speed ratio must be positive, got {ratio}")
    n = audio.samples.size
    out_len = int(round(n / ratio))
    if out_len < 2:
        raise TooShortError(f"speed ratio {ratio} leaves {out_len} samples")
    positions = np.arange(out_len) * ratio
    out = np.interp(positions, np.arange(n), audio.samples)
    return AudioBuffer(out, audio.sample_rate)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Linear-interpolation resampler; content-preserving rate change."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    scaled = speed_perturb(audio, audio.sample_rate / target_rate)
    return AudioBuffer(scaled.samples, target_rate)


def canvas(samples: np.ndarray, n_target: int) -> np.ndarray:
    """Front-pad with zeros (or keep the last n_target samples) to a fixed length."""
    n = samples.size
    if n >= n_target:
        return samples[n - n_target:]
    out = np.zeros(n_target, dtype=samples.dtype)
    out[n_target - n:] = samples
    return out


def make_pair(audio: AudioBuffer, spec: AugmentSpec, rng: np.random.Generator,
              frontend: FrontendConfig) -> FeaturePair:
    """Draw (speed, volume) ratios, perturb, canvas both members, featurize.

    Draw order is fixed (speed first, then volume) and perturbation order is
    speed then volume, so a (seed, utterance) pair reproduces exactly.
    """
    lam_speed = float(rng.uniform(*spec.speed_range))
    lam_volume = float(rng.uniform(*spec.volume_range))
    perturbed = volume_perturb(speed_perturb(audio, lam_speed), lam_volume)
    n_canvas = spec.canvas_samples(frontend.sample_rate)
    orig = AudioBuffer(canvas(audio.samples, n_canvas), frontend.sample_rate)
    aug = AudioBuffer(canvas(perturbed.samples, n_canvas), frontend.sample_rate)
    return FeaturePair(log_mel(orig, frontend), log_mel(aug, frontend), lam_speed, lam_volume)
