"""Corpus materialization: scan, split, corrupt, featurize, and the workspace
layout that the training stages read back.

A prepared workspace contains:

    manifest.tsv             utt_id, path, label_id, split
    labels.txt               class id -> name, one per line
    features.ckpt            tensor container, one T x 40 tensor per utterance
    features_manifest.tsv    utt_id, label_id, frame_count
    corrupted/<utt_id>.wav   noise-corrupted PCM16 waveforms
    unlabeled.tsv            segment_id, source path, start sample (optional)
    corrupted_unlabeled/     corrupted 1 s segments (optional)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, mix_at_snr, quantize_pcm16, read_wav, write_wav
from .augment import AugmentSpec, canvas
from .checkpoint import load_tensors, save_tensors
from .data import (BACKGROUND_DIR, Dataset, LabelMap, Record, scan_dataset,
                   segment_unlabeled, split_dataset, utterance_rng)
from .errors import DataError
from .features import FrontendConfig, log_mel


@dataclass(frozen=True)
class CorpusConfig:
    corrupt: bool = True
    snr_min: float = 0.0
    snr_max: float = 20.0
    unknown_fraction: float = 0.1
    silence_fraction: float = 0.1
    targets: tuple[str, ...] = ()   # empty means the default ten words


def _requantized(samples: np.ndarray, rate: int) -> AudioBuffer:
    """Snap to the PCM16 grid so in-memory features match the written file."""
    ints, _ = quantize_pcm16(samples)
    return AudioBuffer(ints.astype(np.float64) / 32768.0, rate)


def _load_noise_bank(noise_root: Path | None, sample_rate: int) -> list[AudioBuffer]:
    if noise_root is None or not noise_root.is_dir():
        return []
    return [read_wav(p, expected_rate=sample_rate) for p in sorted(noise_root.glob("*.wav"))]


def _corrupt(wave: AudioBuffer, utt_id: str, seed: int, noise_bank: list[AudioBuffer],
             snr_lo: float, snr_hi: float) -> AudioBuffer:
    rng = utterance_rng(seed, "corrupt", utt_id)
    noise = noise_bank[int(rng.integers(0, len(noise_bank)))]
    snr = float(rng.uniform(snr_lo, snr_hi))
    return mix_at_snr(wave, noise, snr, rng)


def _silence_crop(noise_path: str, utt_id: str, seed: int, sample_rate: int) -> AudioBuffer:
    src = read_wav(noise_path, expected_rate=sample_rate)
    rng = utterance_rng(seed, "silence", utt_id)
    if src.samples.size <= sample_rate:
        return AudioBuffer(canvas(src.samples, sample_rate), sample_rate)
    start = int(rng.integers(0, src.samples.size - sample_rate + 1))
    return AudioBuffer(src.samples[start:start + sample_rate], sample_rate)


def prepare_workspace(data_root, out_dir, seed: int, frontend: FrontendConfig,
                      spec: AugmentSpec, corpus: CorpusConfig = CorpusConfig(),
                      noise_root=None, unlabeled_root=None) -> "Workspace":
    """Materialize a corrupted, featurized corpus under out_dir (deterministic in seed)."""
    data_root = Path(data_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = LabelMap(tuple(corpus.targets)) if corpus.targets else LabelMap()
    dataset = split_dataset(scan_dataset(data_root, labels, corpus.silence_fraction))

    noise_dir = Path(noise_root) if noise_root is not None else data_root / BACKGROUND_DIR
    noise_bank = _load_noise_bank(noise_dir, frontend.sample_rate)
    corrupt = corpus.corrupt
    if corrupt and not noise_bank:
        raise DataError(f"noise corruption requested but no WAV noise files under {noise_dir}")

    n_canvas = spec.canvas_samples(frontend.sample_rate)
    archive: dict[str, np.ndarray] = {}
    records = sorted(dataset.records, key=lambda r: r.utt_id)
    for rec in records:
        if rec.label_id == labels.silence_id:
            wave = _silence_crop(rec.path, rec.utt_id, seed, frontend.sample_rate)
        else:
            wave = read_wav(rec.path, expected_rate=frontend.sample_rate)
            if corrupt:
                wave = _corrupt(wave, rec.utt_id, seed, noise_bank,
                                corpus.snr_min, corpus.snr_max)
        wave = _requantized(wave.samples, frontend.sample_rate)
        dest = out / "corrupted" / f"{rec.utt_id}.wav"
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_wav(dest, wave)
        feats = log_mel(AudioBuffer(canvas(wave.samples, n_canvas), frontend.sample_rate), frontend)
        archive[rec.utt_id] = feats.frames

    save_tensors(out / "features.ckpt", archive)
    with open(out / "manifest.tsv", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(f"{rec.utt_id}\t{rec.path}\t{rec.label_id}\t{rec.split}\n")
    with open(out / "features_manifest.tsv", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(f"{rec.utt_id}\t{rec.label_id}\t{archive[rec.utt_id].shape[0]}\n")
    with open(out / "labels.txt", "w", encoding="utf-8") as f:
        for cid in range(labels.n_classes):
            f.write(f"{cid}\t{labels.name_for(cid)}\n")

    if unlabeled_root is not None:
        segments = segment_unlabeled(unlabeled_root, frontend.sample_rate)
        with open(out / "unlabeled.tsv", "w", encoding="utf-8") as f:
            (out / "corrupted_unlabeled").mkdir(exist_ok=True)
            for k, (src, start) in enumerate(segments.segments):
                seg_id = f"seg{k:06d}"
                wave = read_wav(src, expected_rate=frontend.sample_rate)
                piece = AudioBuffer(wave.samples[start:start + frontend.sample_rate],
                                    frontend.sample_rate)
                if noise_bank:
                    piece = _corrupt(piece, seg_id, seed, noise_bank,
                                     corpus.snr_min, corpus.snr_max)
                piece = _requantized(piece.samples, frontend.sample_rate)
                write_wav(out / "corrupted_unlabeled" / f"{seg_id}.wav", piece)
                f.write(f"{seg_id}\t{src}\t{start}\n")

    return Workspace(out, frontend)


class Workspace:
    """Read-side view of a prepared output directory."""

    def __init__(self, root, frontend: FrontendConfig):
        self.root = Path(root)
        self.frontend = frontend
        if not (self.root / "manifest.tsv").is_file():
            raise DataError(f"{self.root} is not a prepared workspace (manifest.tsv missing)")
        self.labels = self._read_labels()
        self.records = self._read_manifest()
        self._features: dict[str, np.ndarray] | None = None

    def _read_labels(self) -> LabelMap:
        names = {}
        for line in (self.root / "labels.txt").read_text(encoding="utf-8").splitlines():
            cid, name = line.split("\t")
            names[int(cid)] = name
        targets = tuple(names[i] for i in range(len(names) - 2))
        return LabelMap(targets)

    def _read_manifest(self) -> list[Record]:
        records = []
        for line in (self.root / "manifest.tsv").read_text(encoding="utf-8").splitlines():
            utt_id, path, label_id, split = line.split("\t")
            records.append(Record(utt_id, path, int(label_id), split))
        return records

    @property
    def features(self) -> dict[str, np.ndarray]:
        if self._features is None:
            self._features = load_tensors(self.root / "features.ckpt")
        return self._features

    def label_of(self, utt_id: str) -> int:
        if not hasattr(self, "_label_index"):
            self._label_index = {r.utt_id: r.label_id for r in self.records}
        return self._label_index[utt_id]

    def ids(self, split: str | None = None) -> list[str]:
        return [r.utt_id for r in self.records if split is None or r.split == split]

    def load_wave(self, utt_id: str) -> AudioBuffer:
        return read_wav(self.root / "corrupted" / f"{utt_id}.wav",
                        expected_rate=self.frontend.sample_rate)

    def unlabeled_ids(self) -> list[str]:
        path = self.root / "unlabeled.tsv"
        if not path.is_file():
            return []
        return [line.split("\t")[0] for line in path.read_text(encoding="utf-8").splitlines()]

    def load_unlabeled_wave(self, seg_id: str) -> AudioBuffer:
        return read_wav(self.root / "corrupted_unlabeled" / f"{seg_id}.wav",
                        expected_rate=self.frontend.sample_rate)

    def pretrain_ids_and_loader(self):
        """Unlabeled segments when present, otherwise the labeled waves with labels ignored."""
        seg_ids = self.unlabeled_ids()
        if seg_ids:
            return seg_ids, self.load_unlabeled_wave
        return self.ids(), self.load_wave
