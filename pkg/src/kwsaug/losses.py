"""Training losses: supervised CE, siamese similarity + reconstruction
composite, and the APC/MPC baseline objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError, TooShortError
from .tensor import Tensor, absolute, as_tensor, log_softmax, mul, narrow, reduce_mean, reduce_sum, sub


@dataclass(frozen=True)
class LossWeights:
    """Mixing factors for the unsupervised composite loss."""

    sim: float = 0.9
    recon: float = 0.05
    recon_aug: float = 0.05

    def __post_init__(self):
        if min(self.sim, self.recon, self.recon_aug) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar loss values for one step; the composite must equal its decomposition."""

    l_ce: float = float("nan")
    l_sim: float = float("nan")
    l_x: float = float("nan")
    l_x_aug: float = float("nan")
    l_ul: float = float("nan")


def _as_2d(t: Tensor, width: int, what: str) -> Tensor:
    if t.data.ndim == 1:
        t = t.reshape((1, t.data.shape[0]))
    if t.data.ndim != 2 or t.data.shape[1] != width:
        raise ShapeError(f"{what}: expected (B, {width}), got {t.data.shape}")
    return t


def ce_loss(logits, labels, n_classes: int | None = None) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    if single:
        logits = logits.reshape((1, logits.data.shape[0]))
    n_classes = logits.data.shape[-1] if n_classes is None else n_classes
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.data.shape[0]}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = reduce_sum(mul(log_softmax(logits), Tensor(onehot)), axis=-1)
    return -reduce_mean(picked)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse operands differ: {a.data.shape} vs {b.data.shape}")
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def sim_loss(e_bn, e_bn_aug) -> Tensor:
    """Mean squared distance between the two bottleneck vectors.

    Gradients flow into both branches; there is no stop-gradient.
    """
    return mse(e_bn, e_bn_aug)


def recon_loss(x_frames, x_tilde) -> Tensor:
    """MSE between the per-column mean of the input features and the regressed vector."""
    frames = np.asarray(x_frames.frames if hasattr(x_frames, "frames") else x_frames,
                        dtype=np.float32)
    if frames.ndim == 2:
        target = frames.mean(axis=0)
    elif frames.ndim == 3:
        target = frames.mean(axis=1)
    else:
        raise ShapeError(f"expected (T, U) or (B, T, U) features, got {frames.shape}")
    x_tilde = as_tensor(x_tilde)
    if x_tilde.data.shape != target.shape:
        raise ShapeError(f"reconstruction shape {x_tilde.data.shape} != target {target.shape}")
    return mse(Tensor(target), x_tilde)


def unsup_loss(l_sim: Tensor, l_x: Tensor, l_x_aug: Tensor, w: LossWeights) -> Tensor:
    return l_sim * w.sim + l_x * w.recon + l_x_aug * w.recon_aug


def report(l_ce: Tensor | None = None, l_sim: Tensor | None = None,
           l_x: Tensor | None = None, l_x_aug: Tensor | None = None,
           l_ul: Tensor | None = None) -> LossReport:
    val = lambda t: float("nan") if t is None else t.item()
    return LossReport(val(l_ce), val(l_sim), val(l_x), val(l_x_aug), val(l_ul))


# ---------------------------------------------------------------------------
# predictive-coding baselines
# ---------------------------------------------------------------------------

def apc_loss(features, predictions: Tensor, shift: int = 3) -> Tensor:
    """Mean absolute error of predicting the frame `shift` steps ahead."""
    if shift < 1:
        raise ValueError(f"shift must be >= 1, got {shift}")
    frames = np.asarray(features.frames if hasattr(features, "frames") else features,
                        dtype=np.float32)
    preds = predictions
    if frames.ndim == 2:
        frames = frames[None]
        if preds.data.ndim == 2:
            preds = preds.reshape((1,) + preds.data.shape)
    t = frames.shape[1]
    if t <= shift:
        raise TooShortError(f"sequence of {t} frames cannot be shifted by {shift}")
    if preds.data.shape != frames.shape:
        raise ShapeError(f"predictions {preds.data.shape} != features {frames.shape}")
    ahead = Tensor(frames[:, shift:])
    valid = narrow(preds, 1, 0, t - shift)
    return reduce_mean(absolute(sub(valid, ahead)))


@dataclass
class MaskPlan:
    """Per-frame masking actions: 0 keep, 1 zero, 2 swap, 3 score-unchanged."""

    actions: np.ndarray
    swap_src: np.ndarray

    KEEP, ZERO, SWAP, SCORED = 0, 1, 2, 3

    @property
    def chosen(self) -> np.ndarray:
        return self.actions != self.KEEP

    def n_chosen(self) -> int:
        return int(np.count_nonzero(self.chosen))


def mpc_mask(features, rng: np.random.Generator, choose_frac: float = 0.15,
             zero_frac: float = 0.8, swap_frac: float = 0.1) -> tuple[np.ndarray, MaskPlan]:
    """Draw a fresh masking plan and apply it to a copy of the features.

    Each frame is chosen independently with probability choose_frac; chosen
    frames are zeroed / replaced by another uniformly drawn frame of the same
    utterance / left unchanged in proportions zero:swap:rest.
    """
    frames = np.asarray(features.frames if hasattr(features, "frames") else features,
                        dtype=np.float32).copy()
    if frames.ndim != 2:
        raise ShapeError(f"masking expects a single (T, U) matrix, got {frames.shape}")
    t = frames.shape[0]
    actions = np.zeros(t, dtype=np.int8)
    swap_src = np.arange(t, dtype=np.int64)
    u = rng.random(t)
    chosen = u < choose_frac
    kinds = rng.random(t)
    actions[chosen & (kinds < zero_frac)] = MaskPlan.ZERO
    actions[chosen & (kinds >= zero_frac) & (kinds < zero_frac + swap_frac)] = MaskPlan.SWAP
    actions[chosen & (kinds >= zero_frac + swap_frac)] = MaskPlan.SCORED
    original = frames.copy()
    frames[actions == MaskPlan.ZERO] = 0.0
    swap_rows = np.flatnonzero(actions == MaskPlan.SWAP)
    if swap_rows.size:
        swap_src[swap_rows] = rng.integers(0, t, size=swap_rows.size)
        frames[swap_rows] = original[swap_src[swap_rows]]
    return frames, MaskPlan(actions, swap_src)


def mpc_loss(predictions: Tensor, originals, plan: MaskPlan) -> Tensor:
    """L1 between predictions and the unmasked frames, at chosen positions only."""
    frames = np.asarray(originals.frames if hasattr(originals, "frames") else originals,
                        dtype=np.float32)
    if predictions.data.shape != frames.shape:
        raise ShapeError(f"predictions {predictions.data.shape} != originals {frames.shape}")
    n = plan.n_chosen()
    if n == 0:
        return Tensor(np.zeros((), dtype=predictions.data.dtype))
    mask = plan.chosen.astype(np.float32)[:, None]
    l1 = mul(absolute(sub(predictions, Tensor(frames))), Tensor(mask))
    return reduce_sum(l1) * (1.0 / (n * frames.shape[1]))
