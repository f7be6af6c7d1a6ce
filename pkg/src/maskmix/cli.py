"""Command-line entry point.

Subcommands: ``synth-data``, ``pretrain``, ``finetune``, ``eval``,
``gradcheck``, ``export-embeddings``, ``sweep``. Every training command takes
``--config`` (a JSON file mirroring TrainConfig field names), ``--seed``
(overriding the config seed), and ``--out`` (the run directory). Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import Checkpoint
from .core import RandomSource
from .data import (
    SyntheticSpec,
    export_embeddings,
    generate_corpus,
    generate_synthetic,
    ingest,
    load_dataset,
)
from .oracle import gradcheck_suite
from .report import (
    render_sweep_figures,
    write_run_outputs,
    write_sweep_summary,
)
from .trainer import TrainConfig, evaluate, finetune, pretrain

SWEEP_AXES = {
    "temperature": (0.05, 0.07, 0.1, 0.2),
    "loss_weight": (0.01, 0.1, 0.5, 1.0),
    "projection_dim": (64, 128, 256, 512),
    "batch_size": (16, 32, 64, 128),
}


def load_config(path: str | None, stage: str, seed: int | None) -> TrainConfig:
    if path is None:
        cfg = TrainConfig(stage=stage)
    else:
        with open(path) as fh:
            data = json.load(fh)
        data["stage"] = stage
        cfg = TrainConfig.from_dict(data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _load_split(manifest_path: str, cfg: TrainConfig):
    manifest = ingest(manifest_path)
    return load_dataset(manifest, cfg.encoder.image_size, cfg.encoder.channels)


def cmd_synth_data(args) -> int:
    rng = RandomSource(args.seed)
    if args.corpus:
        manifest = generate_corpus(args.count, args.size, args.out, rng)
        print(f"wrote corpus of {len(manifest)} images under {args.out}")
    else:
        spec = SyntheticSpec(
            num_classes=args.classes,
            samples_per_class=args.per_class,
            image_size=args.size,
            difficulty=args.difficulty,
            train_fraction=args.train_fraction,
        )
        train, test = generate_synthetic(spec, args.out, rng)
        print(f"wrote {len(train)} train / {len(test)} test images under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, "pretrain", args.seed)
    corpus = _load_split(args.data, cfg)
    checkpoint, report = pretrain(corpus, cfg, RandomSource(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "checkpoint.ckpt")
    csv_path, png_path = write_run_outputs(report, out)
    print(f"pretrain done: final recon loss {report.final('recon_loss'):.6g}")
    print(f"wrote {out / 'checkpoint.ckpt'}, {csv_path}, {png_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, "finetune", args.seed)
    train_set = _load_split(args.data, cfg)
    eval_set = _load_split(args.eval_data, cfg) if args.eval_data else None
    init = Checkpoint.load(args.init) if args.init else None
    checkpoint, report = finetune(train_set, init, cfg, RandomSource(cfg.seed), eval_dataset=eval_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "checkpoint.ckpt")
    csv_path, png_path = write_run_outputs(report, out)
    final_eval = report.final("eval_acc")
    if final_eval is not None:
        print(f"finetune done: eval accuracy {final_eval:.4f}")
    else:
        print(f"finetune done: train accuracy {report.final('train_acc'):.4f}")
    print(f"wrote {out / 'checkpoint.ckpt'}, {csv_path}, {png_path}")
    return 0


def _decode_geometry(checkpoint: Checkpoint, config_path: str | None) -> tuple[int, int]:
    """Image size/channels for decoding: the config file wins over metadata."""
    if config_path:
        cfg = load_config(config_path, "finetune", None)
        return cfg.encoder.image_size, cfg.encoder.channels
    encoder = checkpoint.metadata["encoder"]
    return encoder["image_size"], encoder["channels"]


def cmd_eval(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    image_size, channels = _decode_geometry(checkpoint, args.config)
    dataset = load_dataset(ingest(args.data), image_size, channels)
    result = evaluate(dataset, checkpoint)
    print(f"accuracy: {result.accuracy:.4f}")
    for k, name in enumerate(dataset.class_names):
        print(f"  {name}: {result.per_class[k]:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "accuracy": result.accuracy,
            "per_class": {name: result.per_class[k] for k, name in enumerate(dataset.class_names)},
            "confusion": result.confusion.tolist(),
        }
        (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
        print(f"wrote {out / 'eval.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck_suite(points=args.points, h=args.step, tolerance=args.tolerance, seed=args.seed)
    width = max(len(r.name) for r in reports)
    failures = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_rel_err:.3e}  (h={r.perturbation:g})  {status}")
        failures += 0 if r.passed else 1
    if failures:
        print(f"{failures} gradient check(s) failed at tolerance {args.tolerance:g}")
        return 1
    print(f"all {len(reports)} gradient checks passed at tolerance {args.tolerance:g}")
    return 0


def cmd_export_embeddings(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    image_size, channels = _decode_geometry(checkpoint, args.config)
    dataset = load_dataset(ingest(args.data), image_size, channels)
    rows = export_embeddings(dataset, checkpoint, args.out)
    print(f"wrote {rows} embedding rows to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    base = load_config(args.config, "finetune", args.seed)
    if args.epochs is not None:
        base = replace(base, epochs=args.epochs)
    train_set = _load_split(args.data, base)
    eval_set = _load_split(args.eval_data, base) if args.eval_data else None
    init = Checkpoint.load(args.init) if args.init else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for parameter, values in SWEEP_AXES.items():
        for value in values:
            if parameter == "temperature":
                cfg = replace(base, loss=replace(base.loss, temperature=value))
            elif parameter == "loss_weight":
                cfg = replace(base, loss=replace(base.loss, loss_weight=value))
            elif parameter == "projection_dim":
                cfg = replace(base, projection_dim=value)
            else:
                cfg = replace(base, batch_size=value)
            cell = out / f"{parameter}_{value}"
            cell.mkdir(parents=True, exist_ok=True)
            _, report = finetune(train_set, init, cfg, RandomSource(cfg.seed), eval_dataset=eval_set)
            write_run_outputs(report, cell)
            rows.append(
                {
                    "parameter": parameter,
                    "value": value,
                    "eval_acc": report.final("eval_acc"),
                    "train_acc": report.final("train_acc"),
                    "total_loss": report.final("total_loss"),
                }
            )
            print(f"sweep cell {parameter}={value}: eval_acc={rows[-1]['eval_acc']}")
    write_sweep_summary(rows, out / "sweep_summary.csv")
    figures = render_sweep_figures(rows, out)
    print(f"wrote {out / 'sweep_summary.csv'} and {len(figures)} figure(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskmix",
        description="Masked-image pre-training with mix-supervised contrastive fine-tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset or pre-training corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--corpus", action="store_true", help="generate an unlabeled corpus instead")
    p.add_argument("--count", type=int, default=1000, help="corpus image count")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="masked-image pre-training on a corpus manifest")
    p.add_argument("--data", required=True, help="corpus manifest CSV")
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="contrastive fine-tuning on a labeled manifest")
    p.add_argument("--data", required=True, help="training manifest CSV")
    p.add_argument("--eval-data", help="held-out manifest CSV for per-epoch evaluation")
    p.add_argument("--init", help="pre-trained checkpoint to start from (omit to train from scratch)")
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="optional config whose encoder geometry decodes the images")
    p.add_argument("--out", help="optional directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    p.add_argument("--points", type=int, default=20, help="random parameter points per check")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference perturbation")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="write pooled representations to CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="optional config whose encoder geometry decodes the images")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("sweep", help="axis-wise sensitivity sweep (temperature, weight, dim, batch)")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--init")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override epochs for every cell")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
