"""Dataset discovery, deterministic splits, unlabeled-corpus segmentation,
and batching for both training stages.

Split assignment hashes the speaker portion of an utterance id (SHA-1, pure
integer bands), so the same recording lands in the same split on every
machine and moving a file between word folders never changes its split.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .audio import AudioBuffer, read_wav
from .augment import AugmentSpec, canvas, make_pair
from .errors import DataError
from .features import FrontendConfig, frame_count, log_mel

DEFAULT_TARGETS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
BACKGROUND_DIR = "_background_noise_"
SPLITS = ("train", "dev", "eval")


@dataclass(frozen=True)
class LabelMap:
    """Target words get ids 0..n-1; unknown and silence take the last two ids."""

    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if len(set(self.targets)) != len(self.targets):
            raise DataError("duplicate target words")

    @property
    def unknown_id(self) -> int:
        return len(self.targets)

    @property
    def silence_id(self) -> int:
        return len(self.targets) + 1

    @property
    def n_classes(self) -> int:
        return len(self.targets) + 2

    def id_for(self, word: str) -> int:
        try:
            return self.targets.index(word)
        except ValueError:
            return self.unknown_id

    def name_for(self, class_id: int) -> str:
        if class_id == self.unknown_id:
            return "unknown"
        if class_id == self.silence_id:
            return "silence"
        return self.targets[class_id]


@dataclass
class Record:
    utt_id: str
    path: str
    label_id: int
    split: str = ""


@dataclass
class Dataset:
    records: list[Record]
    labels: LabelMap

    def split_records(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.split or "(untagged)"] = out.get(r.split or "(untagged)", 0) + 1
        return out


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha1(text.encode("utf-8")).digest()[:8], "big")


def utterance_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic per-utterance stream derived from the run seed and string/int tags."""
    parts = [seed & 0xFFFFFFFF]
    for tag in tags:
        parts.append(stable_hash(str(tag)) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(parts))


def split_key(utt_id: str) -> str:
    base = utt_id.rsplit("/", 1)[-1]
    return re.sub(r"_nohash_.*$", "", base)


def which_split(utt_id: str, fractions: tuple[int, int, int] = (80, 10, 10)) -> str:
    if sum(fractions) != 100:
        raise DataError(f"split fractions must sum to 100, got {fractions}")
    band = stable_hash(split_key(utt_id)) % 100
    if band < fractions[0]:
        return "train"
    if band < fractions[0] + fractions[1]:
        return "dev"
    return "eval"


def scan_dataset(root, labels: LabelMap, silence_fraction: float = 0.1) -> Dataset:
    """Walk word folders under `root`; non-target words map to unknown.

    Silence examples are synthesized as seeded 1 s crops of the background
    noise files, one per 1/silence_fraction labeled examples.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    word_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name != BACKGROUND_DIR)
    records: list[Record] = []
    for d in word_dirs:
        label = labels.id_for(d.name)
        for wav in sorted(d.glob("*.wav")):
            records.append(Record(f"{d.name}/{wav.name}", str(wav), label))
    if not records:
        found = sorted(p.name for p in root.iterdir())
        raise DataError(f"no word folders with WAV files under {root}; found {found}")
    if not any(r.label_id < labels.unknown_id for r in records):
        raise DataError(f"no target-word folders under {root}; targets are {labels.targets}")
    noise_files = sorted((root / BACKGROUND_DIR).glob("*.wav")) if (root / BACKGROUND_DIR).is_dir() else []
    if noise_files and silence_fraction > 0:
        quota = int(round(len(records) * silence_fraction))
        for k in range(quota):
            src = noise_files[k % len(noise_files)]
            records.append(Record(f"silence/{k:05d}_{src.stem}", str(src), labels.silence_id))
    ids = [r.utt_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate utterance ids in dataset")
    return Dataset(records, labels)


def split_dataset(dataset: Dataset, fractions: tuple[int, int, int] = (80, 10, 10)) -> Dataset:
    for r in dataset.records:
        r.split = which_split(r.utt_id, fractions)
    return dataset


@dataclass
class UnlabeledCorpus:
    """References to exactly-1-second windows of long-form recordings."""

    segments: list[tuple[str, int]]
    skipped_short: int = 0


def segment_unlabeled(root, sample_rate: int = 16000) -> UnlabeledCorpus:
    """Non-overlapping 1 s windows; files shorter than 1 s are skipped with a count."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"unlabeled root {root} is not a directory")
    segments: list[tuple[str, int]] = []
    skipped = 0
    for wav in sorted(root.rglob("*.wav")):
        n = read_wav(wav, expected_rate=sample_rate).samples.size
        if n < sample_rate:
            skipped += 1
            continue
        for start in range(0, n - sample_rate + 1, sample_rate):
            segments.append((str(wav), start))
    return UnlabeledCorpus(segments, skipped)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle into batches; the trailing short batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    if n < 1:
        raise DataError("cannot batch an empty source")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def canvas_features(frames: np.ndarray, n_frames: int, floor: float) -> np.ndarray:
    """Front-pad with floor-valued rows (or keep the last n_frames rows)."""
    t = frames.shape[0]
    if t >= n_frames:
        return frames[t - n_frames:]
    out = np.full((n_frames, frames.shape[1]), np.float32(np.log(floor)), dtype=np.float32)
    out[n_frames - t:] = frames
    return out


def supervised_batches(features: dict[str, np.ndarray], labels: dict[str, int],
                       ids: list[str], batch_size: int, seed: int,
                       frontend: FrontendConfig, spec: AugmentSpec,
                       unknown_id: int | None = None, unknown_fraction: float = 0.1,
                       epochs: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    """Yield (features (B,T,40), labels (B,), ids) batches over seeded epochs.

    Unknown-labeled items are down-sampled per epoch so they stay near
    `unknown_fraction` of the stream; set unknown_id=None to disable.
    """
    if not ids:
        raise DataError("cannot batch an empty source")
    t_canvas = frame_count(spec.canvas_samples(frontend.sample_rate), frontend)
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 7, epoch]))
        pool = ids
        if unknown_id is not None:
            unk = [i for i in ids if labels[i] == unknown_id]
            others = [i for i in ids if labels[i] != unknown_id]
            if others and unk:
                want = int(round(unknown_fraction / (1 - unknown_fraction) * len(others)))
                if want < len(unk):
                    picked = rng.choice(len(unk), size=want, replace=False) if want else []
                    unk = [unk[int(j)] for j in picked]
                pool = others + unk
        for batch in batch_indices(len(pool), batch_size, rng):
            chosen = [pool[int(j)] for j in batch]
            x = np.stack([canvas_features(features[i], t_canvas, frontend.log_floor)
                          for i in chosen])
            y = np.asarray([labels[i] for i in chosen], dtype=np.int64)
            yield x, y, chosen
        epoch += 1


@dataclass
class PairBatch:
    original: np.ndarray   # (B, T_canvas, n_mels)
    augmented: np.ndarray
    ids: list[str]
    speeds: list[float] = field(default_factory=list)
    volumes: list[float] = field(default_factory=list)


def pair_batches(load_wave: Callable[[str], AudioBuffer], ids: list[str],
                 batch_size: int, seed: int, spec: AugmentSpec,
                 frontend: FrontendConfig,
                 epochs: int | None = None) -> Iterator[PairBatch]:
    """Yield augmented-pair batches; ratios are drawn fresh per epoch per utterance
    from a (seed, epoch, utterance id) stream, so runs reproduce exactly."""
    if not ids:
        raise DataError("cannot batch an empty source")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 11, epoch]))
        for batch in batch_indices(len(ids), batch_size, rng):
            chosen = [ids[int(j)] for j in batch]
            orig, aug, speeds, volumes = [], [], [], []
            for utt in chosen:
                pair = make_pair(load_wave(utt), spec,
                                 utterance_rng(seed, "pair", epoch, utt), frontend)
                orig.append(pair.original.frames)
                aug.append(pair.augmented.frames)
                speeds.append(pair.speed)
                volumes.append(pair.volume)
            yield PairBatch(np.stack(orig), np.stack(aug), chosen, speeds, volumes)
        epoch += 1


def feature_batches(features: dict[str, np.ndarray], ids: list[str], batch_size: int,
                    seed: int, frontend: FrontendConfig, spec: AugmentSpec,
                    epochs: int | None = None) -> Iterator[tuple[np.ndarray, list[str]]]:
    """Plain feature batches (canvassed), for the predictive-coding objectives."""
    if not ids:
        raise DataError("cannot batch an empty source")
    t_canvas = frame_count(spec.canvas_samples(frontend.sample_rate), frontend)
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 13, epoch]))
        for batch in batch_indices(len(ids), batch_size, rng):
            chosen = [ids[int(j)] for j in batch]
            x = np.stack([canvas_features(features[i], t_canvas, frontend.log_floor)
                          for i in chosen])
            yield x, chosen
        epoch += 1
