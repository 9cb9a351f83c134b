"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Vector relative error: ||a - n|| / max(||a||, ||n||, floor).

    The floor absorbs structurally-zero gradients (e.g. parameters the loss
    is invariant to), where the central difference measures only float noise.
    """
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    wrt: Sequence[int] | None = None, h: float = 1e-5,
                    max_entries: int = 24, rng: np.random.Generator | None = None) -> float:
    """Compare autodiff gradients of a scalar-valued fn against central differences.

    `inputs` are float64 arrays; `wrt` selects which positions to check
    (default: all). Entries are sampled when an input is larger than
    `max_entries`. Each checked input's gradient is compared as a vector;
    the worst per-input relative error is returned.
    """
    rng = rng or np.random.default_rng(0)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=(i in wrt))
               for i, a in enumerate(inputs)]
    with Tape() as tape:
        loss = fn(*tensors)
    backward(loss, tape, params=[tensors[i] for i in wrt])

    def eval_loss() -> float:
        return fn(*[Tensor(t.data) for t in tensors]).item()

    worst = 0.0
    for i in wrt:
        t = tensors[i]
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=max_entries, replace=False)
        gflat = t.grad.reshape(-1)
        analytic, numeric = [], []
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            up = eval_loss()
            flat[j] = orig - h
            down = eval_loss()
            flat[j] = orig
            numeric.append((up - down) / (2.0 * h))
            analytic.append(float(gflat[j]))
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    return worst
