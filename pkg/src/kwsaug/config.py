"""Flat key=value run configuration.

One file mirrors every tunable across the frontend, augmentation, model,
trainer, loss-weight, and corpus sections; '#' starts a comment; unknown keys
are errors. Command-line flags override file values, and every run freezes
its resolved configuration beside its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .augment import AugmentSpec
from .errors import ConfigError
from .features import FrontendConfig
from .losses import LossWeights
from .model import ModelConfig
from .prepare import CorpusConfig
from .trainer import TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got '{s}'")


def _parse_words(s: str) -> tuple[str, ...]:
    return tuple(w for w in s.split(",") if w)


@dataclass
class RunConfig:
    frontend: FrontendConfig
    augment: AugmentSpec
    model: ModelConfig
    train: TrainConfig
    weights: LossWeights
    corpus: CorpusConfig


# key -> (section attribute, field name, parser)
KEYS: dict[str, tuple[str, str, object]] = {
    "sample_rate": ("frontend", "sample_rate", int),
    "window_samples": ("frontend", "window", int),
    "hop_samples": ("frontend", "hop", int),
    "fft_size": ("frontend", "fft_size", int),
    "n_mels": ("frontend", "n_mels", int),
    "mel_fmin": ("frontend", "fmin", float),
    "mel_fmax": ("frontend", "fmax", float),
    "log_floor": ("frontend", "log_floor", float),
    "speed_min": ("augment", "speed_range", None),
    "speed_max": ("augment", "speed_range", None),
    "volume_min": ("augment", "volume_range", None),
    "volume_max": ("augment", "volume_range", None),
    "canvas_seconds": ("augment", "canvas_seconds", float),
    "n_conv": ("model", "n_conv", int),
    "conv_channels": ("model", "conv_channels", int),
    "kernel_size": ("model", "kernel_size", int),
    "conv_stride": ("model", "conv_stride", int),
    "n_attn": ("model", "n_attn", int),
    "d_model": ("model", "d_model", int),
    "n_heads": ("model", "n_heads", int),
    "d_ff": ("model", "d_ff", int),
    "r_frames": ("model", "r_frames", int),
    "d_bottleneck": ("model", "d_bottleneck", int),
    "n_classes": ("model", "n_classes", int),
    "model_mels": ("model", "n_mels", int),
    "d_recon": ("model", "d_recon", int),
    "dropout": ("model", "dropout", float),
    "use_positional": ("model", "use_positional", _parse_bool),
    "max_positions": ("model", "max_positions", int),
    "steps": ("train", "steps", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "seed": ("train", "seed", int),
    "eval_every": ("train", "eval_every", int),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "objective": ("train", "objective", str),
    "apc_shift": ("train", "apc_shift", int),
    "dropout_active": ("train", "dropout_active", _parse_bool),
    "plateau_window": ("train", "plateau_window", int),
    "plateau_tol": ("train", "plateau_tol", float),
    "target_accuracy": ("train", "target_accuracy", float),
    "weight_sim": ("weights", "sim", float),
    "weight_recon": ("weights", "recon", float),
    "weight_recon_aug": ("weights", "recon_aug", float),
    "corrupt": ("corpus", "corrupt", _parse_bool),
    "snr_min": ("corpus", "snr_min", float),
    "snr_max": ("corpus", "snr_max", float),
    "unknown_fraction": ("corpus", "unknown_fraction", float),
    "silence_fraction": ("corpus", "silence_fraction", float),
    "targets": ("corpus", "targets", _parse_words),
}

_RANGE_KEYS = {
    "speed_min": ("augment", "speed_range", 0),
    "speed_max": ("augment", "speed_range", 1),
    "volume_min": ("augment", "volume_range", 0),
    "volume_max": ("augment", "volume_range", 1),
}


def parse_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = value
    return values


def resolve(file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; every value is validated."""
    merged: dict[str, str] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = str(value)

    kwargs: dict[str, dict] = {"frontend": {}, "augment": {}, "model": {},
                               "train": {}, "weights": {}, "corpus": {}}
    ranges: dict[tuple[str, str], list] = {}
    for key, value in merged.items():
        if key in _RANGE_KEYS:
            section, attr, pos = _RANGE_KEYS[key]
            ranges.setdefault((section, attr), [None, None])[pos] = float(value)
            continue
        section, attr, parser = KEYS[key]
        try:
            kwargs[section][attr] = parser(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"config key '{key}': {exc}") from exc

    for (section, attr), (lo, hi) in ranges.items():
        base = getattr(AugmentSpec(), attr)  # range keys only exist on the augment section
        kwargs[section][attr] = (base[0] if lo is None else lo,
                                 base[1] if hi is None else hi)
    if "n_mels" in merged and "model_mels" not in merged:
        kwargs["model"]["n_mels"] = int(merged["n_mels"])
    try:
        return RunConfig(frontend=FrontendConfig(**kwargs["frontend"]),
                         augment=AugmentSpec(**kwargs["augment"]),
                         model=ModelConfig(**kwargs["model"]),
                         train=TrainConfig(**kwargs["train"]),
                         weights=LossWeights(**kwargs["weights"]),
                         corpus=CorpusConfig(**kwargs["corpus"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def freeze(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration as sorted key=value lines."""
    lines = []
    for key, (section, attr, _parser) in KEYS.items():
        if key in _RANGE_KEYS:
            sec, attr2, pos = _RANGE_KEYS[key]
            value = getattr(getattr(cfg, sec), attr2)[pos]
        else:
            value = getattr(getattr(cfg, section), attr)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(sorted(lines)) + "\n", encoding="utf-8")
