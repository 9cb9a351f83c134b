"""Dense float tensors with reverse-mode automatic differentiation.

Forward math runs on numpy arrays. While a Tape is active (``with Tape() as
tape:``), every primitive whose inputs require gradients appends a record
(inputs, output, backward rule) in execution order; ``backward`` replays the
records in reverse so each output's gradient is fully accumulated before it
is pushed to the inputs. With no active tape the same functions run
forward-only, which is the evaluation path.

Training uses float32 throughout; float64 is allowed as a shadow mode for
finite-difference gradient checks only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# Set True in tests to assert every primitive output is finite.
CHECK_FINITE = False

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; all graph building goes through the module primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Execution-ordered record of primitive applications.

    Tensors recorded on a tape must not be mutated until backward has run;
    a tape and its tensors belong to a single worker at a time.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _make(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite forward output")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(TapeRecord(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Parameters listed in `params` that the loss does not reach get a zero
    gradient instead of None.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    for rec in tape.records:
        rec.output.grad = None
        for t in rec.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gi
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", (a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make("mul", (a, b), out, bw)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.data.dtype)

    def bw(g):
        return (g * s,)

    return _make("scale", (a,), out, bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make("relu", (a,), out, bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", (a,), out, bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make("abs", (a,), out, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", (a,), out, bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose axes {axes} do not permute rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bw(g):
        return (g.transpose(inverse),)

    return _make("transpose", (a,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    rank = ts[0].data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", ts, out, bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along one axis."""
    a = as_tensor(a)
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"narrow axis {axis} out of range for rank {rank}")
    axis = axis % rank
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) exceeds extent {a.data.shape[axis]} on axis {axis}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(rank))
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("narrow", (a,), out, bw)


def _norm_axis(axis, rank: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(rank))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % rank for a in axis)
    for a in axis:
        if not -rank <= a < rank:
            raise ShapeError(f"reduction axis {a} out of range for rank {rank}")
    return axes


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make("sum", (a,), out, bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[d] for d in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _make("mean", (a,), out, bw)


# ---------------------------------------------------------------------------
# linear algebra and NN primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            # batched activations x 2-D weight: one flat gemm instead of a
            # batched product followed by a reduction over the batch axes
            k, n = b.data.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return _unbroadcast(ga, a.data.shape), gb

    return _make("matmul", (a, b), out, bw)


def softmax(a) -> Tensor:
    """Softmax over the last axis (max-shifted for stability)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax", (a,), s, bw)


def log_softmax(a) -> Tensor:
    """log(softmax) over the last axis, computed without intermediate overflow."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", (a,), ls, bw)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    if gain.data.shape != x.data.shape[-1:] or shift.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm gain/shift {gain.data.shape}/{shift.data.shape} "
            f"do not match feature extent {x.data.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + shift.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_shift = g.sum(axis=lead)
        g_gain = (g * xhat).sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_shift

    return _make("layer_norm", (x, gain, shift), out, bw)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability p, scale the rest by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return _make("dropout", (x,), out, bw)


def conv2d(x, kernels, bias, stride: tuple[int, int] = (2, 2)) -> Tensor:
    """2D cross-correlation with zero "same" padding.

    x may be (C_in, H, W) or batched (B, C_in, H, W); kernels are
    (C_out, C_in, KH, KW). Output spatial extents are ceil(H/sh) x ceil(W/sw),
    with total padding split TF-style (extra pad goes to the bottom/right).
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d needs (B,C,H,W) x (O,C,KH,KW), got {x.data.shape} x {kernels.data.shape}")
    B, C, H, W = xd.shape
    O, CK, KH, KW = kernels.data.shape
    if CK != C:
        raise ShapeError(f"conv2d channel mismatch: input {C} vs kernel {CK}")
    if H < 1 or W < 1:
        raise ShapeError(f"conv2d spatial extents must be >= 1, got {H}x{W}")
    if bias.data.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({O},)")
    sh, sw = stride
    OH = -(-H // sh)
    OW = -(-W // sw)
    ph = max((OH - 1) * sh + KH - H, 0)
    pw = max((OW - 1) * sw + KW - W, 0)
    ph0, pw0 = ph // 2, pw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph0, ph - ph0), (pw0, pw - pw0)))

    acc = np.zeros((O, B, OH, OW), dtype=np.result_type(xd.dtype, kernels.data.dtype))
    for i in range(KH):
        for j in range(KW):
            patch = xp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw]
            acc += np.tensordot(kernels.data[:, :, i, j], patch, axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1) + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g[None] if squeeze else g
        grad_bias = gb.sum(axis=(0, 2, 3))
        grad_k = np.zeros_like(kernels.data)
        grad_xp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(KH):
            for j in range(KW):
                patch = xp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw]
                grad_k[:, :, i, j] = np.tensordot(gb, patch, axes=([0, 2, 3], [0, 2, 3]))
                spread = np.tensordot(kernels.data[:, :, i, j], gb, axes=([0], [1]))
                grad_xp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw] += np.moveaxis(spread, 0, 1)
        grad_x = grad_xp[:, :, ph0:ph0 + H, pw0:pw0 + W]
        if squeeze:
            grad_x = grad_x[0]
        return grad_x, grad_k, grad_bias

    return _make("conv2d", (x, kernels, bias), out, bw)
