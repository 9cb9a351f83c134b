"""Command-line entry point: prepare, toygen, augment, pretrain, finetune,
evaluate, sweep, gradcheck.

Exit codes: 0 success, 2 data error, 3 numeric abort. Every training-style
subcommand writes a frozen copy of its resolved configuration next to its
outputs, and identical inputs plus seed reproduce identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .audio import read_wav, write_wav
from .augment import speed_perturb, volume_perturb
from .checkpoint import load_checkpoint
from .errors import DataError, NumericError
from .prepare import Workspace, prepare_workspace
from .toygen import TOY_FILLERS, TOY_TARGETS, generate
from . import trainer as tr


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value configuration file")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")


def _resolved(args) -> cfgmod.RunConfig:
    file_values = cfgmod.parse_file(args.config) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.sets:
        if "=" not in item:
            raise DataError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag in ("steps", "batch_size", "objective"):
        if getattr(args, flag, None) is not None:
            overrides[flag] = str(getattr(args, flag))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return cfgmod.resolve(file_values, overrides)


def _freeze(cfg: cfgmod.RunConfig, out_dir, name: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.freeze(cfg, out / f"{name}.config")


def cmd_toygen(args) -> int:
    targets = tuple(args.targets.split(",")) if args.targets else TOY_TARGETS
    n = generate(args.out, clips_per_word=args.clips_per_word, targets=targets,
                 fillers=TOY_FILLERS, noise_files=args.noise_files, seed=args.seed or 0)
    print(f"wrote {n} clips under {args.out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolved(args)
    _freeze(cfg, args.out, "prepare")
    ws = prepare_workspace(args.data_root, args.out, cfg.train.seed, cfg.frontend,
                           cfg.augment, cfg.corpus, noise_root=args.noise_root,
                           unlabeled_root=args.unlabeled_root)
    counts = {}
    for r in ws.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    print(f"prepared {len(ws.records)} utterances ({summary}) into {args.out}")
    return 0


def cmd_augment(args) -> int:
    audio = read_wav(args.infile, expected_rate=None)
    out = volume_perturb(speed_perturb(audio, args.speed), args.volume)
    clamped = write_wav(args.out, out)
    if clamped:
        print(f"clamped {clamped} samples to [-1, 1] while writing PCM16", file=sys.stderr)
    print(f"wrote {args.out} ({out.samples.size} samples at {out.sample_rate} Hz)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolved(args)
    _freeze(cfg, args.out, "pretrain")
    ws = Workspace(args.data, cfg.frontend)
    ids, load_wave = ws.pretrain_ids_and_loader()
    ckpt = tr.pretrain(cfg.model, cfg.train, cfg.weights, cfg.frontend, cfg.augment,
                       ids, load_wave, args.out)
    print(f"pretrained {ckpt.step} steps -> {Path(args.out) / 'pretrain_final.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolved(args)
    _freeze(cfg, args.out, "finetune")
    ws = Workspace(args.data, cfg.frontend)
    init = load_checkpoint(args.from_ckpt, expect=cfg.model) if args.from_ckpt else None
    ckpt = tr.finetune(cfg.model, cfg.train, cfg.frontend, cfg.augment, ws, args.out,
                       init=init, unknown_fraction=cfg.corpus.unknown_fraction)
    print(f"trained {ckpt.step} steps ({ckpt.stage}) -> "
          f"{Path(args.out) / (ckpt.stage + '_final.ckpt')}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolved(args)
    ws = Workspace(args.data, cfg.frontend)
    ckpt = load_checkpoint(args.ckpt)
    metrics = tr.evaluate(ckpt, ws, args.split, cfg.train.batch_size, cfg.frontend, cfg.augment)
    print(f"accuracy={100.0 * metrics.accuracy:.2f}")
    names = [ws.labels.name_for(i) if i < ws.labels.n_classes else f"class{i}"
             for i in range(metrics.confusion.shape[0])]
    if args.confusion:
        print("\t" + "\t".join(names))
        for i, row in enumerate(metrics.confusion):
            print(names[i] + "\t" + "\t".join(str(v) for v in row))
    if args.out:
        _freeze(cfg, args.out, "evaluate")
        with open(Path(args.out) / "evaluation.tsv", "w", encoding="utf-8") as f:
            f.write(f"split\t{args.split}\naccuracy\t{metrics.accuracy:.6f}\nn\t{metrics.n}\n")
            f.write("confusion\t" + "\t".join(names) + "\n")
            for i, row in enumerate(metrics.confusion):
                f.write(names[i] + "\t" + "\t".join(str(v) for v in row) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolved(args)
    _freeze(cfg, args.out, "sweep")
    ws = Workspace(args.data, cfg.frontend)
    steps_list = tuple(int(s) for s in args.steps_list.split(","))
    ft_cfg = replace(cfg.train, steps=args.finetune_steps)
    rows = tr.sweep_pretrain_steps(cfg.model, cfg.train, ft_cfg, cfg.weights,
                                   cfg.frontend, cfg.augment, ws, args.out, steps_list)
    for row in rows:
        print(f"pretrain_steps={row.pretrain_steps}\tdev_accuracy={row.dev_accuracy:.4f}"
              f"\tsteps_to_target={row.steps_to_target}")
    return 0


def cmd_gradcheck(args) -> int:
    from .selfcheck import run_gradient_suite
    worst = run_gradient_suite(verbose=True)
    print(f"worst relative error: {worst:.3e}")
    return 0 if worst <= 1e-3 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwsaug",
                                     description="keyword spotting with augmentation-based "
                                                 "unsupervised pre-training")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("toygen", help="synthesize a labeled toy corpus", formatter_class=fmt)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--clips-per-word", type=int, default=60, help="clips per target word")
    p.add_argument("--targets", default=None, help="comma-separated target words")
    p.add_argument("--noise-files", type=int, default=4, help="background noise files to write")
    p.add_argument("--seed", type=int, default=0, help="synthesis seed")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("prepare", help="scan, split, corrupt, featurize a corpus",
                       formatter_class=fmt)
    p.add_argument("--data-root", required=True, help="word-folder corpus root")
    p.add_argument("--noise-root", default=None,
                   help="noise WAV directory (default: <data-root>/_background_noise_)")
    p.add_argument("--unlabeled-root", default=None,
                   help="long-form WAVs to segment into 1 s pre-training pieces")
    p.add_argument("--out", required=True, help="workspace output directory")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="speed/volume-perturb one WAV", formatter_class=fmt)
    p.add_argument("--in", dest="infile", required=True, help="input WAV (any sample rate)")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--speed", type=float, default=1.0, help="time-axis scaling ratio")
    p.add_argument("--volume", type=float, default=1.0, help="amplitude scaling ratio")
    p.set_defaults(func=cmd_augment)

    for name, handler in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, formatter_class=fmt,
                           help=f"{name} on a prepared workspace")
        p.add_argument("--data", required=True, help="prepared workspace directory")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--steps", type=int, default=None,
                       help="training steps (default from config: 30000)")
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                       help="batch size (default from config: 200)")
        if name == "pretrain":
            p.add_argument("--objective", choices=tr.OBJECTIVES, default=None,
                           help="unsupervised objective (default from config: proposed)")
        else:
            p.add_argument("--from", dest="from_ckpt", default=None,
                           help="pretrain checkpoint; omit to train supervised from scratch")
        _add_common(p)
        p.set_defaults(func=handler)

    p = sub.add_parser("evaluate", help="accuracy and confusion on one split",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="prepared workspace directory")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval",
                   help="which split to score")
    p.add_argument("--confusion", action="store_true", help="also print the confusion matrix")
    p.add_argument("--out", default=None,
                   help="optional directory for evaluation.tsv and the frozen config")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="pre-training-steps sweep", formatter_class=fmt)
    p.add_argument("--data", required=True, help="prepared workspace directory")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--steps-list", default="0,100,200",
                   help="comma-separated pre-training step counts")
    p.add_argument("--finetune-steps", type=int, default=100,
                   help="fine-tuning steps per sweep point")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="batch size (default from config: 200)")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive "
                                         "and composite loss", formatter_class=fmt)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
