"""Finite-difference suite covering every differentiable primitive and the
composite training losses, on a reduced-width model so it runs in seconds."""

from __future__ import annotations

import numpy as np

from .gradcheck import check_gradients
from .losses import LossWeights, ce_loss, recon_loss, sim_loss, unsup_loss
from .model import ModelConfig, classify, forward_bottleneck, init_params, reconstruct
from .tensor import (absolute, concat, conv2d, layer_norm, log, log_softmax,
                     matmul, narrow, reduce_mean, reduce_sum, relu, softmax)


def small_model_config() -> ModelConfig:
    # 4 channels x (8 mels -> 4 -> 2) = 8 = d_model; everything else shrunk to match
    return ModelConfig(n_conv=2, conv_channels=4, n_attn=1, d_model=8, n_heads=2,
                       d_ff=16, r_frames=2, d_bottleneck=10, n_classes=3, n_mels=8,
                       d_recon=8, dropout=0.0, max_positions=32)


def _away_from_zero(rng, shape, margin=0.1):
    # keep ReLU/abs kinks away from the finite-difference step
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, object, list[np.ndarray]]]:
    """(name, scalar-valued fn, float64 inputs) triples; >= 5 shapes per primitive."""
    cases: list[tuple[str, object, list[np.ndarray]]] = []
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)

    for k, (m, kk, n) in enumerate([(2, 3, 4), (1, 5, 2), (4, 4, 4), (3, 2, 5), (5, 1, 3)]):
        cases.append((f"matmul_{k}", lambda a, b: reduce_sum(matmul(a, b) * matmul(a, b)),
                      [u(m, kk), u(kk, n)]))
    cases.append(("matmul_batched", lambda a, b: reduce_sum(matmul(a, b) * matmul(a, b)),
                  [u(2, 3, 4, 5), u(5, 3)]))

    for k, shape in enumerate([(3,), (2, 4), (3, 2, 2), (5,), (1, 6)]):
        cases.append((f"add_{k}", lambda a, b: reduce_sum(a + b) + reduce_mean((a + b) * (a + b)),
                      [u(*shape), u(*shape)]))
        cases.append((f"mul_{k}", lambda a, b: reduce_sum(a * b), [u(*shape), u(*shape)]))
        cases.append((f"scale_{k}", lambda a: reduce_sum(a * (-1.7)), [u(*shape)]))
        cases.append((f"relu_{k}", lambda a: reduce_sum(relu(a)), [_away_from_zero(rng, shape)]))
        cases.append((f"abs_{k}", lambda a: reduce_sum(absolute(a)), [_away_from_zero(rng, shape)]))
        cases.append((f"mean_{k}", lambda a: reduce_mean(a * a), [u(*shape)]))
    cases.append(("add_broadcast", lambda a, b: reduce_sum((a + b) * (a + b)), [u(3, 4), u(4)]))

    for k, shape in enumerate([(6,), (2, 3), (3, 4), (2, 2, 3), (5, 2)]):
        cases.append((f"reshape_{k}",
                      lambda a: reduce_sum(a.reshape((a.data.size,)) * a.reshape((a.data.size,))),
                      [u(*shape)]))
        cases.append((f"log_{k}", lambda a: reduce_sum(log(a)),
                      [rng.uniform(0.2, 1.5, size=shape)]))
    for k, (shape, axes) in enumerate([((2, 3), (1, 0)), ((2, 3, 4), (2, 0, 1)),
                                       ((4, 2), (1, 0)), ((2, 2, 2), (1, 2, 0)),
                                       ((3, 1, 2), (0, 2, 1))]):
        cases.append((f"transpose_{k}", lambda a, ax=axes: reduce_sum(a.transpose(ax) * a.transpose(ax)),
                      [u(*shape)]))
    for k, axis in enumerate([0, 1, -1, 0, 1]):
        shape = (3, 4) if k % 2 else (2, 5)
        cases.append((f"concat_{k}", lambda a, b, ax=axis: reduce_sum(concat([a, b], ax) * concat([a, b], ax)),
                      [u(*shape), u(*shape)]))
        cases.append((f"sum_axis_{k}", lambda a, ax=axis: reduce_sum(reduce_sum(a, axis=ax) * reduce_sum(a, axis=ax)),
                      [u(*shape)]))
        cases.append((f"narrow_{k}", lambda a, ax=axis: reduce_sum(narrow(a, ax, 1, 2) * narrow(a, ax, 1, 2)),
                      [u(4, 4)]))
    for k, shape in enumerate([(5,), (2, 4), (3, 3), (1, 7), (2, 2, 3)]):
        cases.append((f"softmax_{k}", lambda a: reduce_sum(softmax(a) * softmax(a)), [u(*shape)]))
        cases.append((f"log_softmax_{k}", lambda a: reduce_sum(log_softmax(a) * log_softmax(a)),
                      [u(*shape)]))
    for k, shape in enumerate([(2, 4), (3, 5), (1, 6), (2, 2, 4), (4, 3)]):
        d = shape[-1]
        cases.append((f"layer_norm_{k}",
                      lambda x, g, s: reduce_sum(layer_norm(x, g, s) * layer_norm(x, g, s)),
                      [u(*shape), rng.uniform(0.5, 1.5, size=d), u(d)]))
    conv_shapes = [((1, 4, 4), (2, 1, 3, 3), (1, 1)), ((2, 5, 6), (3, 2, 3, 3), (2, 2)),
                   ((1, 6, 3), (1, 1, 3, 3), (2, 2)), ((3, 4, 5), (2, 3, 3, 3), (2, 2)),
                   ((2, 7, 7), (2, 2, 3, 3), (2, 2))]
    for k, (xs, ks, stride) in enumerate(conv_shapes):
        cases.append((f"conv2d_{k}",
                      lambda x, kk, b, st=stride: reduce_sum(conv2d(x, kk, b, st) * conv2d(x, kk, b, st)),
                      [u(*xs), u(*ks), u(ks[0])]))
    return cases


def composite_loss_cases(rng: np.random.Generator):
    """The full-model losses as functions of every trainable parameter tensor."""
    cfg = small_model_config()
    params = init_params(cfg, rng, dtype=np.float64)
    names = [n for n, t in params.tensors.items() if t.requires_grad]
    x = rng.uniform(-1.0, 1.0, size=(2, 9, cfg.n_mels))
    x_aug = rng.uniform(-1.0, 1.0, size=(2, 9, cfg.n_mels))
    labels = np.array([0, 2])
    weights = LossWeights()

    def rebuild(tensors):
        from .model import KwsParams
        merged = dict(zip(names, tensors))
        merged["pos.table"] = params["pos.table"]
        return KwsParams(merged, cfg)

    def l_ce(*tensors):
        p = rebuild(tensors)
        e_bn, _ = forward_bottleneck(p, x)
        return ce_loss(classify(p, e_bn), labels, cfg.n_classes)

    def l_sim(*tensors):
        p = rebuild(tensors)
        e_bn, _ = forward_bottleneck(p, x)
        e_bn_aug, _ = forward_bottleneck(p, x_aug)
        return sim_loss(e_bn, e_bn_aug)

    def l_x(*tensors):
        p = rebuild(tensors)
        e_bn, _ = forward_bottleneck(p, x)
        return recon_loss(x.astype(np.float32), reconstruct(p, e_bn))

    def l_ul(*tensors):
        p = rebuild(tensors)
        e_bn, _ = forward_bottleneck(p, x)
        e_bn_aug, _ = forward_bottleneck(p, x_aug)
        return unsup_loss(sim_loss(e_bn, e_bn_aug),
                          recon_loss(x.astype(np.float32), reconstruct(p, e_bn)),
                          recon_loss(x_aug.astype(np.float32), reconstruct(p, e_bn_aug)),
                          weights)

    inputs = [params[n].data for n in names]
    return [("loss_ce", l_ce, inputs), ("loss_sim", l_sim, inputs),
            ("loss_recon", l_x, inputs), ("loss_composite", l_ul, inputs)]


def run_gradient_suite(verbose: bool = False, max_entries: int = 12) -> float:
    rng = np.random.default_rng(20240901)
    worst = 0.0
    for name, fn, inputs in primitive_cases(rng):
        err = check_gradients(fn, inputs, h=1e-5, max_entries=max_entries, rng=rng)
        worst = max(worst, err)
        if verbose:
            print(f"{'PASS' if err <= 1e-3 else 'FAIL'}  {name:<16s} rel_err={err:.3e}")
    for name, fn, inputs in composite_loss_cases(rng):
        err = check_gradients(fn, inputs, h=1e-6, max_entries=8, rng=rng)
        worst = max(worst, err)
        if verbose:
            print(f"{'PASS' if err <= 1e-3 else 'FAIL'}  {name:<16s} rel_err={err:.3e}")
    return worst
