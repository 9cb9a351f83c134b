"""Binary tensor container and model checkpoints.

Container layout (all integers little-endian):

    magic "KWSCKPT1" (8 bytes)
    u32 format version
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 extent per
                dimension, raw float32 payload
    u64 FNV-1a checksum of every preceding byte

The same container backs feature archives (one named T x 40 tensor per
utterance). Model checkpoints additionally carry reserved "meta/..." tensors
for the step counter, stage tag, and the model-config echo, plus optional
"adam/..." optimizer-state tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import KwsParams, ModelConfig, NON_TRAINABLE, parameter_shapes
from .tensor import Tensor

MAGIC = b"KWSCKPT1"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors in insertion order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor '{name}' is {arr.dtype}; the container stores float32")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<Q", fnv1a64(body)))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a tensor container")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out[name] = arr.copy()
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes after last tensor")
    return out


STAGES = ("pretrain", "finetune", "supervised")


@dataclass
class Checkpoint:
    """Model parameters plus training provenance."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    stage: str = "pretrain"
    adam: dict | None = None

    def param_tensors(self) -> KwsParams:
        tensors = {name: Tensor(arr.copy(), requires_grad=name not in NON_TRAINABLE, name=name)
                   for name, arr in self.params.items()}
        return KwsParams(tensors, self.config)


def _encode_config(cfg: ModelConfig) -> np.ndarray:
    vals = [cfg.n_conv, cfg.conv_channels, cfg.kernel_size, cfg.conv_stride,
            cfg.n_attn, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.r_frames,
            cfg.d_bottleneck, cfg.n_classes, cfg.n_mels, cfg.d_recon,
            cfg.dropout, int(cfg.use_positional), cfg.max_positions]
    return np.asarray(vals, dtype=np.float32)


def _decode_config(vec: np.ndarray) -> ModelConfig:
    v = [float(x) for x in vec]
    return ModelConfig(n_conv=int(v[0]), conv_channels=int(v[1]), kernel_size=int(v[2]),
                       conv_stride=int(v[3]), n_attn=int(v[4]), d_model=int(v[5]),
                       n_heads=int(v[6]), d_ff=int(v[7]), r_frames=int(v[8]),
                       d_bottleneck=int(v[9]), n_classes=int(v[10]), n_mels=int(v[11]),
                       d_recon=int(v[12]), dropout=v[13], use_positional=bool(v[14]),
                       max_positions=int(v[15]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage tag '{ckpt.stage}'")
    tensors: dict[str, np.ndarray] = {
        "meta/model_config": _encode_config(ckpt.config),
        "meta/step": np.asarray(float(ckpt.step), dtype=np.float32),
        "meta/stage": np.asarray(float(STAGES.index(ckpt.stage)), dtype=np.float32),
    }
    for name, arr in ckpt.params.items():
        tensors[f"param/{name}"] = arr
    if ckpt.adam is not None:
        tensors["adam/t"] = np.asarray(float(ckpt.adam["t"]), dtype=np.float32)
        for name, arr in ckpt.adam["m"].items():
            tensors[f"adam/m/{name}"] = arr
        for name, arr in ckpt.adam["v"].items():
            tensors[f"adam/v/{name}"] = arr
    save_tensors(path, tensors)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    tensors = load_tensors(path)
    for key in ("meta/model_config", "meta/step", "meta/stage"):
        if key not in tensors:
            raise CheckpointError(f"{path}: missing '{key}'")
    cfg = _decode_config(tensors["meta/model_config"])
    if expect is not None and not np.array_equal(_encode_config(expect), tensors["meta/model_config"]):
        raise CheckpointError(f"{path}: stored model config does not match the requested one")
    params = {name[len("param/"):]: arr for name, arr in tensors.items()
              if name.startswith("param/")}
    expected = parameter_shapes(cfg,
                                include_reconstruct="reconstruct.w" in params,
                                include_frame_head="frame_head.w" in params)
    for name, arr in params.items():
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor 'param/{name}'")
        if arr.shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor 'param/{name}' has shape {arr.shape}, config implies {expected[name]}")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    adam = None
    if "adam/t" in tensors:
        adam = {
            "t": int(tensors["adam/t"]),
            "m": {n[len("adam/m/"):]: a for n, a in tensors.items() if n.startswith("adam/m/")},
            "v": {n[len("adam/v/"):]: a for n, a in tensors.items() if n.startswith("adam/v/")},
        }
    stage = STAGES[int(tensors["meta/stage"])]
    return Checkpoint(cfg, params, int(tensors["meta/step"]), stage, adam)
