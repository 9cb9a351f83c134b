"""WAV ingestion, PCM16 writing, and SNR-controlled noise mixing.

Only PCM16 mono RIFF/WAVE files are accepted; samples are scaled by 1/32768
into floats. Waveform math is done in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AudioFormatError, DataError


@dataclass
class AudioBuffer:
    """Mono waveform samples plus the sample rate in Hz.

    Samples are nominally in [-1, 1]; values outside are permitted after
    augmentation or mixing (clamping happens only when writing PCM16).
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise DataError(f"audio must be a non-empty 1-D signal, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav_bytes(data: bytes, expected_rate: int | None = 16000) -> AudioBuffer:
    """Parse a PCM16 mono RIFF/WAVE byte string.

    Raises AudioFormatError naming the offending field for non-PCM encodings,
    multi-channel audio, truncated chunks, or (when expected_rate is set) a
    mismatched sample rate.
    """
    if len(data) < 12 or data[0:4] != b"RIFF":
        raise AudioFormatError("RIFF: missing or short RIFF header")
    if data[8:12] != b"WAVE":
        raise AudioFormatError("WAVE: container form is not WAVE")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if body_start + size > len(data):
            raise AudioFormatError(f"{cid.decode('ascii', 'replace').strip()}: chunk truncated "
                                   f"(declares {size} bytes, {len(data) - body_start} remain)")
        if cid == b"fmt ":
            if size < 16:
                raise AudioFormatError("fmt: chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", data, body_start)
        elif cid == b"data":
            payload = data[body_start:body_start + size]
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise AudioFormatError("fmt: chunk missing")
    if payload is None:
        raise AudioFormatError("data: chunk missing")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise AudioFormatError(f"fmt.audio_format: expected PCM (1), got {audio_format}")
    if channels != 1:
        raise AudioFormatError(f"fmt.channels: expected mono (1), got {channels}")
    if bits != 16:
        raise AudioFormatError(f"fmt.bits_per_sample: expected 16, got {bits}")
    if len(payload) == 0:
        raise AudioFormatError("data: chunk is empty")
    if len(payload) % 2:
        payload = payload[:-1]
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError(
            f"fmt.sample_rate: expected {expected_rate} Hz, got {rate}; "
            f"resample first (augment.resample keeps content at ratio 1 while retargeting the rate)")
    ints = np.frombuffer(payload, dtype="<i2")
    return AudioBuffer(ints.astype(np.float64) / 32768.0, rate)


def read_wav(path, expected_rate: int | None = 16000) -> AudioBuffer:
    return read_wav_bytes(Path(path).read_bytes(), expected_rate=expected_rate)


def quantize_pcm16(samples: np.ndarray) -> tuple[np.ndarray, int]:
    """Round samples to the PCM16 grid; returns (int16 array, clamp count)."""
    scaled = np.rint(np.asarray(samples, dtype=np.float64) * 32768.0)
    clamped = int(np.count_nonzero((scaled < -32768) | (scaled > 32767)))
    return np.clip(scaled, -32768, 32767).astype("<i2"), clamped


def write_wav(path, audio: AudioBuffer) -> int:
    """Write PCM16 mono; samples outside [-1, 1] are clamped. Returns clamp count."""
    ints, clamped = quantize_pcm16(audio.samples)
    payload = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, audio.sample_rate,
                                    audio.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)
    return clamped


def mix_at_snr(speech: AudioBuffer, noise: AudioBuffer, snr_db: float,
               rng: np.random.Generator) -> AudioBuffer:
    """Add a noise segment scaled so the speech-to-noise power ratio is snr_db.

    Noise shorter than the speech is tiled; longer noise contributes a random
    offset segment. Power is mean squared amplitude of the segment actually
    mixed, so recomputing the SNR from the two components returns snr_db.
    """
    s = speech.samples
    n = noise.samples
    p_speech = float(np.mean(s * s))
    if p_speech == 0.0:
        raise DataError("degenerate input: speech is silent (zero power)")
    if not np.any(n):
        raise DataError("degenerate input: noise is silent (zero power)")
    if n.size < s.size:
        n = np.tile(n, -(-s.size // n.size))
    offset = int(rng.integers(0, n.size - s.size + 1))
    seg = n[offset:offset + s.size]
    p_seg = float(np.mean(seg * seg))
    if p_seg == 0.0:
        raise DataError("degenerate input: selected noise segment is silent")
    alpha = np.sqrt(p_speech / (p_seg * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(s + alpha * seg, speech.sample_rate)
