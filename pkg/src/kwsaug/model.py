"""The CNN-Attention keyword classifier.

Input features (T x 40) are treated as a one-channel image, passed through
stride-2 conv+ReLU blocks, restructured so channels x surviving mel bins form
the 320-wide sequence, position-encoded, run through post-norm transformer
encoder layers, reduced by concatenating the last r time steps, and projected
through a ReLU bottleneck. Separate affine heads classify (12-way), regress
the 40-dim mean-feature target, and (for the predictive-coding baselines)
emit per-frame predictions at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TooShortError
from .tensor import (Tape, Tensor, add, conv2d, dropout, layer_norm, matmul,
                     narrow, relu, reshape, softmax, transpose)


def _ceil_div(n: int, d: int) -> int:
    return -(-n // d)


@dataclass(frozen=True)
class ModelConfig:
    n_conv: int = 2
    conv_channels: int = 32
    kernel_size: int = 3
    conv_stride: int = 2
    n_attn: int = 2
    d_model: int = 320
    n_heads: int = 4
    d_ff: int = 1024
    r_frames: int = 2
    d_bottleneck: int = 800
    n_classes: int = 12
    n_mels: int = 40
    d_recon: int = 40
    dropout: float = 0.1
    use_positional: bool = True
    max_positions: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        mel_out = self.n_mels
        for _ in range(self.n_conv):
            mel_out = _ceil_div(mel_out, self.conv_stride)
        if self.conv_channels * mel_out != self.d_model:
            raise ShapeError(
                f"conv output width {self.conv_channels} x {mel_out} does not equal "
                f"the attention width {self.d_model}")
        if self.d_model % self.n_heads:
            raise ShapeError(f"width {self.d_model} not divisible by {self.n_heads} heads")

    def conv_seq_len(self, n_frames: int) -> int:
        out = n_frames
        for _ in range(self.n_conv):
            out = _ceil_div(out, self.conv_stride)
        return out

    def min_input_frames(self) -> int:
        t = 1
        while self.conv_seq_len(t) < self.r_frames:
            t += 1
        return t

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_feat(self) -> int:
        return self.r_frames * self.d_model


# parameter roles, in init-draw order: (suffix template, kind)
def parameter_shapes(cfg: ModelConfig, include_reconstruct: bool = True,
                     include_frame_head: bool = False) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i in range(cfg.n_conv):
        shapes[f"conv{i}.kernel"] = (cfg.conv_channels, c_in, cfg.kernel_size, cfg.kernel_size)
        shapes[f"conv{i}.bias"] = (cfg.conv_channels,)
        c_in = cfg.conv_channels
    shapes["pos.table"] = (cfg.max_positions, cfg.d_model)
    for i in range(cfg.n_attn):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"attn{i}.{w}"] = (cfg.d_model, cfg.d_model)
            shapes[f"attn{i}.b{w[1]}"] = (cfg.d_model,)
        shapes[f"attn{i}.ln1.gain"] = (cfg.d_model,)
        shapes[f"attn{i}.ln1.shift"] = (cfg.d_model,)
        shapes[f"attn{i}.ffn.w1"] = (cfg.d_model, cfg.d_ff)
        shapes[f"attn{i}.ffn.b1"] = (cfg.d_ff,)
        shapes[f"attn{i}.ffn.w2"] = (cfg.d_ff, cfg.d_model)
        shapes[f"attn{i}.ffn.b2"] = (cfg.d_model,)
        shapes[f"attn{i}.ln2.gain"] = (cfg.d_model,)
        shapes[f"attn{i}.ln2.shift"] = (cfg.d_model,)
    shapes["bottleneck.w"] = (cfg.d_feat, cfg.d_bottleneck)
    shapes["bottleneck.b"] = (cfg.d_bottleneck,)
    shapes["project.w"] = (cfg.d_bottleneck, cfg.n_classes)
    shapes["project.b"] = (cfg.n_classes,)
    if include_reconstruct:
        shapes["reconstruct.w"] = (cfg.d_bottleneck, cfg.d_recon)
        shapes["reconstruct.b"] = (cfg.d_recon,)
    if include_frame_head:
        up = cfg.conv_stride ** cfg.n_conv
        shapes["frame_head.w"] = (cfg.d_model, up * cfg.n_mels)
        shapes["frame_head.b"] = (up * cfg.n_mels,)
    return shapes


NON_TRAINABLE = ("pos.table",)


class KwsParams:
    """Named parameter tensors; the positional table is the only frozen entry."""

    def __init__(self, tensors: dict[str, Tensor], cfg: ModelConfig):
        self.tensors = tensors
        self.cfg = cfg

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.tensors.values() if t.requires_grad)


def positional_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:  # conv kernels: (out, in, kh, kw)
        receptive = int(np.prod(shape[2:]))
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                include_reconstruct: bool = True, include_frame_head: bool = False) -> KwsParams:
    """Uniform Glorot weights, all biases 0.1, layer-norm gain 1 / shift 0."""
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg, include_reconstruct, include_frame_head).items():
        if name == "pos.table":
            data = positional_table(cfg.max_positions, cfg.d_model)
            tensors[name] = Tensor(data.astype(dtype), requires_grad=False, name=name)
            continue
        if name.endswith((".gain",)):
            data = np.ones(shape)
        elif name.endswith((".shift",)):
            data = np.zeros(shape)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".b")):
            data = np.full(shape, 0.1)
        else:
            a = glorot_limit(shape)
            data = rng.uniform(-a, a, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return KwsParams(tensors, cfg)


@dataclass
class ForwardTrace:
    """Intermediate activations of one forward pass."""

    e_cnn: Tensor | None = None       # (B, T', d_model) restructured conv output
    e_tran: Tensor | None = None      # (B, T', d_model)
    e_feat: Tensor | None = None      # (B, r * d_model)
    e_bn: Tensor | None = None        # (B, d_bottleneck)
    logits: Tensor | None = None      # (B, n_classes)
    recon: Tensor | None = None       # (B, d_recon)
    attn_probs: list[np.ndarray] = field(default_factory=list)


def attention_layer(x: Tensor, params: KwsParams, prefix: str, cfg: ModelConfig,
                    train: bool = False, rng: np.random.Generator | None = None,
                    trace: ForwardTrace | None = None) -> Tensor:
    """One post-norm transformer encoder layer over (B, T, d_model)."""
    if x.data.ndim != 3:
        raise ShapeError(f"attention layer expects (B, T, d), got {x.data.shape}")
    b, t, d = x.data.shape
    if t < 1:
        raise ShapeError("attention layer needs at least one time step")
    hd = cfg.head_dim

    def heads(y: Tensor) -> Tensor:
        return transpose(reshape(y, (b, t, cfg.n_heads, hd)), (0, 2, 1, 3))

    q = heads(add(matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]))
    k = heads(add(matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]))
    v = heads(add(matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    probs = softmax(scores)
    if trace is not None:
        trace.attn_probs.append(probs.data)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    attn_out = add(matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    if train and cfg.dropout > 0:
        attn_out = dropout(attn_out, cfg.dropout, rng)
    h = layer_norm(add(x, attn_out), params[f"{prefix}.ln1.gain"],
                   params[f"{prefix}.ln1.shift"], cfg.ln_eps)
    ff = add(matmul(relu(add(matmul(h, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"])),
                    params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    if train and cfg.dropout > 0:
        ff = dropout(ff, cfg.dropout, rng)
    return layer_norm(add(h, ff), params[f"{prefix}.ln2.gain"],
                      params[f"{prefix}.ln2.shift"], cfg.ln_eps)


def _as_batch(x) -> tuple[Tensor, bool]:
    # dtype is preserved so the float64 shadow mode stays exact end to end
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.data.ndim == 2:
        return reshape(t, (1,) + t.data.shape), True
    if t.data.ndim == 3:
        return t, False
    raise ShapeError(f"expected (T, n_mels) or (B, T, n_mels) features, got {t.data.shape}")


def encode(params: KwsParams, x, train: bool = False,
           rng: np.random.Generator | None = None,
           trace: ForwardTrace | None = None) -> tuple[Tensor, bool]:
    """Run conv blocks + attention stack; returns (E_tran (B,T',d), was_single)."""
    cfg = params.cfg
    xb, single = _as_batch(x)
    b, t, n_mels = xb.data.shape
    if n_mels != cfg.n_mels:
        raise ShapeError(f"expected {cfg.n_mels} feature columns, got {n_mels}")
    if cfg.conv_seq_len(t) < cfg.r_frames:
        raise TooShortError(
            f"{t} input frames leave a conv sequence shorter than r={cfg.r_frames}; "
            f"need at least {cfg.min_input_frames()} frames")
    # (B, T, mel) -> one-channel image (B, 1, mel, T)
    h = reshape(transpose(xb, (0, 2, 1)), (b, 1, n_mels, t))
    stride = (cfg.conv_stride, cfg.conv_stride)
    for i in range(cfg.n_conv):
        h = relu(conv2d(h, params[f"conv{i}.kernel"], params[f"conv{i}.bias"], stride))
    _, c, m, tp = h.data.shape
    seq = reshape(transpose(h, (0, 3, 1, 2)), (b, tp, c * m))
    if trace is not None:
        trace.e_cnn = seq
    if cfg.use_positional:
        seq = add(seq, narrow(params["pos.table"], 0, 0, tp))
    for i in range(cfg.n_attn):
        seq = attention_layer(seq, params, f"attn{i}", cfg, train, rng, trace)
    if trace is not None:
        trace.e_tran = seq
    return seq, single


def forward_bottleneck(params: KwsParams, x, train: bool = False,
                       rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardTrace]:
    """Features -> bottleneck vector E_bn; the trace keeps the intermediates."""
    cfg = params.cfg
    trace = ForwardTrace()
    seq, single = encode(params, x, train, rng, trace)
    b, tp, d = seq.data.shape
    feat = reshape(narrow(seq, 1, tp - cfg.r_frames, cfg.r_frames), (b, cfg.d_feat))
    trace.e_feat = feat
    e_bn = relu(add(matmul(feat, params["bottleneck.w"]), params["bottleneck.b"]))
    if single:
        e_bn = reshape(e_bn, (cfg.d_bottleneck,))
    trace.e_bn = e_bn
    return e_bn, trace


def _affine_head(params: KwsParams, e_bn, w_name: str, b_name: str) -> Tensor:
    cfg = params.cfg
    e = e_bn if isinstance(e_bn, Tensor) else Tensor(np.asarray(e_bn))
    single = e.data.ndim == 1
    if e.data.shape[-1] != cfg.d_bottleneck:
        raise ShapeError(f"expected {cfg.d_bottleneck}-dim bottleneck input, got {e.data.shape}")
    if single:
        e = reshape(e, (1, cfg.d_bottleneck))
    out = add(matmul(e, params[w_name]), params[b_name])
    if single:
        out = reshape(out, (out.data.shape[-1],))
    return out


def classify(params: KwsParams, e_bn) -> Tensor:
    """Affine map to class logits; softmax is applied by the CE loss / at inference."""
    return _affine_head(params, e_bn, "project.w", "project.b")


def reconstruct(params: KwsParams, e_bn) -> Tensor:
    """Linear regression head for the mean input-feature vector."""
    return _affine_head(params, e_bn, "reconstruct.w", "reconstruct.b")


def frame_predictions(params: KwsParams, e_tran: Tensor, n_frames: int) -> Tensor:
    """Per-frame head for the predictive-coding baselines.

    Each encoder frame emits stride^n_conv consecutive input-resolution frame
    predictions; the concatenation is trimmed to the original frame count.
    """
    cfg = params.cfg
    b, tp, d = e_tran.data.shape
    up = cfg.conv_stride ** cfg.n_conv
    h = add(matmul(e_tran, params["frame_head.w"]), params["frame_head.b"])
    full = reshape(h, (b, tp * up, cfg.n_mels))
    if n_frames > tp * up:
        raise ShapeError(f"cannot predict {n_frames} frames from {tp} encoder steps")
    return narrow(full, 1, 0, n_frames)


def forward_full(params: KwsParams, x, train: bool = False,
                 rng: np.random.Generator | None = None,
                 with_recon: bool = False) -> ForwardTrace:
    e_bn, trace = forward_bottleneck(params, x, train, rng)
    trace.logits = classify(params, e_bn)
    if with_recon:
        trace.recon = reconstruct(params, e_bn)
    return trace


def parameter_count(cfg: ModelConfig, include_reconstruct: bool = True,
                    include_frame_head: bool = False) -> int:
    """Trainable parameter count implied by the config (positional table excluded)."""
    shapes = parameter_shapes(cfg, include_reconstruct, include_frame_head)
    return sum(int(np.prod(s)) for name, s in shapes.items() if name not in NON_TRAINABLE)
