"""Training orchestration: unsupervised pre-training, supervised training /
fine-tuning, evaluation, and the pre-training-steps sweep.

One trainer owns the parameters (single writer). Every run logs a TSV with
columns step, l_ce, l_sim, l_x, l_x_aug, l_ul, lr, wall_ms, e_bn_std and
writes periodic checkpoints; a non-finite loss or gradient aborts the run
with the last periodic checkpoint left on disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentSpec
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import feature_batches, pair_batches, supervised_batches
from .errors import DataError, NumericError
from .features import FrontendConfig
from .losses import (LossWeights, apc_loss, ce_loss, mpc_mask, recon_loss,
                     sim_loss, unsup_loss)
from .model import (KwsParams, ModelConfig, classify, encode, forward_bottleneck,
                    frame_predictions, init_params, reconstruct)
from .optim import Adam
from .tensor import Tape, Tensor, absolute, backward, mul, reduce_sum, sub
from .prepare import Workspace

OBJECTIVES = ("proposed", "apc", "mpc")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 30000
    batch_size: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0          # 0 disables periodic dev evaluation
    checkpoint_every: int = 0    # 0 writes only the final checkpoint
    objective: str = "proposed"
    apc_shift: int = 3
    dropout_active: bool = True
    plateau_window: int = 0      # optional plateau stop; 0 keeps the fixed budget
    plateau_tol: float = 1e-4
    target_accuracy: float = 0.9

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got '{self.objective}'")


class MetricsLog:
    COLUMNS = ("step", "l_ce", "l_sim", "l_x", "l_x_aug", "l_ul", "lr", "wall_ms", "e_bn_std")

    def __init__(self, path):
        self.path = Path(path)
        self.rows: list[dict] = []
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write("\t".join(self.COLUMNS) + "\n")

    def write(self, **values) -> None:
        row = {c: values.get(c, float("nan")) for c in self.COLUMNS}
        self.rows.append(row)
        cells = [str(int(row["step"]))] + [f"{float(row[c]):.9g}" for c in self.COLUMNS[1:]]
        self._fh.write("\t".join(cells) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray   # (S, S), rows are true classes
    n: int


def confusion_and_accuracy(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    return Metrics(float(np.trace(confusion)) / y_true.size, confusion, int(y_true.size))


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} at step {step}; last periodic checkpoint retained")


def _plateau(history: list[float], window: int, tol: float) -> bool:
    if window <= 0 or len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    return (old - new) / max(abs(old), 1e-12) < tol


def _snapshot(model_cfg: ModelConfig, params: KwsParams, step: int, stage: str,
              adam: Adam | None) -> Checkpoint:
    return Checkpoint(model_cfg, {k: t.data.copy() for k, t in params.tensors.items()},
                      step=step, stage=stage, adam=adam.state() if adam else None)


def bottleneck_dispersion(e_bn) -> float:
    """Collapse monitor: per-dimension std across the batch, averaged over dims.

    Near zero means the network maps every input to the same bottleneck vector
    (the degenerate optimum of similarity-only training); the overall spread of
    entry values stays large in that regime, so a plain entries-std would miss it.
    """
    arr = e_bn.data if hasattr(e_bn, "data") else np.asarray(e_bn)
    if arr.ndim < 2 or arr.shape[0] < 2:
        return float("nan")
    return float(np.mean(np.std(arr, axis=0)))


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain(model_cfg: ModelConfig, cfg: TrainConfig, weights: LossWeights,
             frontend: FrontendConfig, spec: AugmentSpec, ids: list[str], load_wave,
             out_dir, snapshot_steps: tuple[int, ...] = ()) -> Checkpoint:
    """Optimize the selected unsupervised objective on label-free waveforms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng_init = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 101])
    params = init_params(model_cfg, rng_init,
                         include_frame_head=cfg.objective in ("apc", "mpc"))
    adam = Adam(params.trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    drop_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 31])
    mask_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 41])
    train = cfg.dropout_active and model_cfg.dropout > 0

    snapshots = sorted(set(snapshot_steps))
    if 0 in snapshots:
        save_checkpoint(_snapshot(model_cfg, params, 0, "pretrain", None),
                        out / "pretrain_step0.ckpt")
    if cfg.steps == 0:
        ckpt = _snapshot(model_cfg, params, 0, "pretrain", None)
        save_checkpoint(ckpt, out / "pretrain_final.ckpt")
        return ckpt
    last_step = 0

    if cfg.objective == "proposed":
        stream = pair_batches(load_wave, ids, cfg.batch_size, cfg.seed, spec, frontend)
    else:
        from .audio import AudioBuffer
        from .augment import canvas
        from .features import log_mel
        n_canvas = spec.canvas_samples(frontend.sample_rate)
        feats = {utt: log_mel(AudioBuffer(canvas(load_wave(utt).samples, n_canvas),
                                          frontend.sample_rate), frontend).frames
                 for utt in ids}
        stream = feature_batches(feats, ids, cfg.batch_size, cfg.seed, frontend, spec)

    log = MetricsLog(out / "pretrain_log.tsv")
    mask_log = open(out / "mask_stats.tsv", "w", encoding="utf-8") if cfg.objective == "mpc" else None
    if mask_log:
        mask_log.write("step\tchosen_frac\tzero_frac\tswap_frac\tunchanged_frac\n")
    mask_counts = np.zeros(4, dtype=np.int64)  # frames, zeroed, swapped, scored
    history: list[float] = []
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            with Tape() as tape:
                if cfg.objective == "proposed":
                    batch = next(stream)
                    e_bn, _ = forward_bottleneck(params, batch.original, train, drop_rng)
                    e_bn_aug, _ = forward_bottleneck(params, batch.augmented, train, drop_rng)
                    l_sim = sim_loss(e_bn, e_bn_aug)
                    l_x = recon_loss(batch.original, reconstruct(params, e_bn))
                    l_x_aug = recon_loss(batch.augmented, reconstruct(params, e_bn_aug))
                    loss = unsup_loss(l_sim, l_x, l_x_aug, weights)
                    extra = dict(l_sim=l_sim.item(), l_x=l_x.item(),
                                 l_x_aug=l_x_aug.item(), l_ul=loss.item(),
                                 e_bn_std=bottleneck_dispersion(e_bn))
                elif cfg.objective == "apc":
                    x, _ = next(stream)
                    e_tran, _ = encode(params, x, train, drop_rng)
                    preds = frame_predictions(params, e_tran, x.shape[1])
                    loss = apc_loss(x, preds, cfg.apc_shift)
                    extra = dict(l_ul=loss.item())
                else:  # mpc
                    x, _ = next(stream)
                    masked = np.empty_like(x)
                    chosen_mask = np.zeros(x.shape[:2], dtype=np.float32)
                    for i in range(x.shape[0]):
                        masked[i], plan = mpc_mask(x[i], mask_rng)
                        chosen_mask[i] = plan.chosen
                        mask_counts += (x.shape[1], int((plan.actions == 1).sum()),
                                        int((plan.actions == 2).sum()),
                                        int((plan.actions == 3).sum()))
                    e_tran, _ = encode(params, masked, train, drop_rng)
                    preds = frame_predictions(params, e_tran, x.shape[1])
                    n_chosen = float(chosen_mask.sum())
                    if n_chosen:
                        l1 = mul(absolute(sub(preds, Tensor(x))), Tensor(chosen_mask[:, :, None]))
                        loss = reduce_sum(l1) * (1.0 / (n_chosen * x.shape[2]))
                    else:
                        loss = Tensor(np.zeros((), dtype=np.float32))
                    extra = dict(l_ul=loss.item())
            if cfg.objective != "proposed":
                # collapse monitor, outside the tape so nothing extra is recorded
                e_bn, _ = forward_bottleneck(params, x, False, None)
                extra["e_bn_std"] = bottleneck_dispersion(e_bn)
            _check_finite(loss.item(), step, "loss")
            backward(loss, tape, params=list(params.trainable().values()))
            adam.step()
            history.append(extra["l_ul"])
            log.write(step=step, lr=cfg.lr, wall_ms=(time.perf_counter() - t0) * 1000.0, **extra)
            if mask_log and (step % 10 == 0 or step == cfg.steps):
                frames, zeroed, swapped, scored = mask_counts
                chosen = zeroed + swapped + scored
                mask_log.write(f"{step}\t{chosen / frames:.6f}\t{zeroed / max(chosen, 1):.6f}"
                               f"\t{swapped / max(chosen, 1):.6f}\t{scored / max(chosen, 1):.6f}\n")
            last_step = step
            if step in snapshots:
                save_checkpoint(_snapshot(model_cfg, params, step, "pretrain", adam),
                                out / f"pretrain_step{step}.ckpt")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(_snapshot(model_cfg, params, step, "pretrain", adam),
                                out / "pretrain_latest.ckpt")
            if _plateau(history, cfg.plateau_window, cfg.plateau_tol):
                break
    finally:
        log.close()
        if mask_log:
            mask_log.close()
    ckpt = _snapshot(model_cfg, params, last_step, "pretrain", adam)
    save_checkpoint(ckpt, out / "pretrain_final.ckpt")
    return ckpt


# ---------------------------------------------------------------------------
# supervised training / fine-tuning
# ---------------------------------------------------------------------------

def _params_for_finetune(model_cfg: ModelConfig, cfg: TrainConfig,
                         init: Checkpoint | None) -> tuple[KwsParams, str, dict | None]:
    if init is None:
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 101])
        return init_params(model_cfg, rng, include_reconstruct=False), "supervised", None
    params = init.param_tensors()
    if init.stage == "pretrain":
        # drop the auxiliary heads, re-draw the project head
        for name in list(params.tensors):
            if name.startswith(("reconstruct.", "frame_head.")):
                del params.tensors[name]
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 202])
        fresh = init_params(model_cfg, rng, include_reconstruct=False)
        for name in ("project.w", "project.b"):
            params.tensors[name] = fresh[name]
        return params, "finetune", None
    return params, init.stage, init.adam


def finetune(model_cfg: ModelConfig, cfg: TrainConfig, frontend: FrontendConfig,
             spec: AugmentSpec, ws: Workspace, out_dir,
             init: Checkpoint | None = None, unknown_fraction: float = 0.1) -> Checkpoint:
    """Cross-entropy training on the train split; `init=None` trains from scratch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, stage, adam_state = _params_for_finetune(model_cfg, cfg, init)
    adam = Adam(params.trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    if adam_state is not None:
        adam.load_state(adam_state)
    drop_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 31])
    train_flag = cfg.dropout_active and model_cfg.dropout > 0

    ids = ws.ids("train")
    if not ids:
        raise DataError("train split is empty")
    labels = {i: ws.label_of(i) for i in ws.ids()}
    stream = supervised_batches(ws.features, labels, ids, cfg.batch_size, cfg.seed,
                                frontend, spec, unknown_id=ws.labels.unknown_id,
                                unknown_fraction=unknown_fraction)
    step0 = init.step if init is not None and init.stage == stage else 0
    log = MetricsLog(out / f"{stage}_log.tsv")
    eval_log = open(out / "eval_log.tsv", "w", encoding="utf-8") if cfg.eval_every else None
    if eval_log:
        eval_log.write("step\tsplit\taccuracy\n")
    history: list[float] = []
    last_step = step0
    try:
        for step in range(step0 + 1, step0 + cfg.steps + 1):
            t0 = time.perf_counter()
            x, y, _ = next(stream)
            with Tape() as tape:
                e_bn, _ = forward_bottleneck(params, x, train_flag, drop_rng)
                loss = ce_loss(classify(params, e_bn), y, model_cfg.n_classes)
            _check_finite(loss.item(), step, "loss")
            backward(loss, tape, params=list(params.trainable().values()))
            adam.step()
            history.append(loss.item())
            log.write(step=step, l_ce=loss.item(), lr=cfg.lr,
                      wall_ms=(time.perf_counter() - t0) * 1000.0,
                      e_bn_std=bottleneck_dispersion(e_bn))
            last_step = step
            if eval_log and step % cfg.eval_every == 0:
                acc = evaluate_params(params, ws, "dev", cfg.batch_size, frontend, spec).accuracy
                eval_log.write(f"{step}\tdev\t{acc:.6f}\n")
                eval_log.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(_snapshot(model_cfg, params, step, stage, adam),
                                out / f"{stage}_latest.ckpt")
            if _plateau(history, cfg.plateau_window, cfg.plateau_tol):
                break
    finally:
        log.close()
        if eval_log:
            eval_log.close()
    ckpt = _snapshot(model_cfg, params, last_step, stage, adam)
    save_checkpoint(ckpt, out / f"{stage}_final.ckpt")
    return ckpt


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(params: KwsParams, x: np.ndarray) -> np.ndarray:
    """Argmax class per utterance (deterministic, dropout off)."""
    e_bn, _ = forward_bottleneck(params, x, train=False)
    logits = classify(params, e_bn)
    return np.argmax(logits.data, axis=-1)


def evaluate_params(params: KwsParams, ws: Workspace, split: str, batch_size: int,
                    frontend: FrontendConfig, spec: AugmentSpec) -> Metrics:
    ids = ws.ids(split)
    if not ids:
        raise DataError(f"evaluation split '{split}' is empty")
    labels = {i: ws.label_of(i) for i in ids}
    y_true, y_pred = [], []
    stream = supervised_batches(ws.features, labels, ids, batch_size, seed=0,
                                frontend=frontend, spec=spec, unknown_id=None, epochs=1)
    for x, y, _ in stream:
        y_true.append(y)
        y_pred.append(predict(params, x))
    return confusion_and_accuracy(np.concatenate(y_true), np.concatenate(y_pred),
                                  params.cfg.n_classes)


def evaluate(ckpt: Checkpoint, ws: Workspace, split: str, batch_size: int,
             frontend: FrontendConfig, spec: AugmentSpec) -> Metrics:
    return evaluate_params(ckpt.param_tensors(), ws, split, batch_size, frontend, spec)


# ---------------------------------------------------------------------------
# pre-training-steps sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    pretrain_steps: int
    dev_accuracy: float
    steps_to_target: int


def sweep_pretrain_steps(model_cfg: ModelConfig, pre_cfg: TrainConfig, ft_cfg: TrainConfig,
                         weights: LossWeights, frontend: FrontendConfig, spec: AugmentSpec,
                         ws: Workspace, out_dir, steps_list: tuple[int, ...]) -> list[SweepRow]:
    """Pre-train once to max(steps_list) with snapshots, fine-tune each snapshot,
    and report dev accuracy plus convergence speed per pre-training budget."""
    if not steps_list:
        raise DataError("steps_list must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_list = tuple(sorted(set(int(s) for s in steps_list)))
    ids, load_wave = ws.pretrain_ids_and_loader()
    pretrain(model_cfg, replace(pre_cfg, steps=max(steps_list)), weights, frontend, spec,
             ids, load_wave, out, snapshot_steps=steps_list)
    if ft_cfg.eval_every <= 0:
        ft_cfg = replace(ft_cfg, eval_every=max(1, min(20, ft_cfg.steps)))
    rows = []
    for n in steps_list:
        ckpt = load_checkpoint(out / f"pretrain_step{n}.ckpt", expect=model_cfg)
        ft_dir = out / f"finetune_from_{n}"
        final = finetune(model_cfg, ft_cfg, frontend, spec, ws, ft_dir, init=ckpt)
        dev_acc = evaluate(final, ws, "dev", ft_cfg.batch_size, frontend, spec).accuracy
        steps_to_target = -1
        eval_path = ft_dir / "eval_log.tsv"
        if eval_path.is_file():
            for line in eval_path.read_text(encoding="utf-8").splitlines()[1:]:
                step_s, _, acc_s = line.split("\t")
                if float(acc_s) >= ft_cfg.target_accuracy:
                    steps_to_target = int(step_s)
                    break
        rows.append(SweepRow(n, dev_acc, steps_to_target))
    with open(out / "sweep.tsv", "w", encoding="utf-8") as f:
        f.write("pretrain_steps\tdev_accuracy\tsteps_to_target\n")
        for row in rows:
            f.write(f"{row.pretrain_steps}\t{row.dev_accuracy:.6f}\t{row.steps_to_target}\n")
    return rows
