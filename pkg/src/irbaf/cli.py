"""Command-line entry point: ``irbaf <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset, experiment, fda_swap, flow_style, metrics


def _counts(text: str) -> dict[int, int]:
    out = {}
    for item in text.split(","):
        cls, n = item.split(":")
        out[int(cls)] = int(n)
    return out


def _output(path: str) -> Path:
    return Path(os.environ.get(experiment.ENV_OUTPUT) or path)


def cmd_gen_data(args) -> int:
    cfg = dataset.SynthConfig(
        seed=args.seed,
        images_per_class=_counts(args.source_counts),
        target_images_per_class=_counts(args.target_counts) if args.target_counts else None,
        image_size=(args.size, args.size),
        style_gap=args.style_gap,
        num_classes=args.num_classes,
    )
    src, tgt = dataset.generate_synthetic(cfg, _output(args.out))
    print(f"source: {len(src.entries)} images {src.counts_per_class}")
    print(f"target: {len(tgt.entries)} images {tgt.counts_per_class}")
    return 0


def cmd_style_train(args) -> int:
    source, target = dataset.load_manifest(args.source), dataset.load_manifest(args.target)
    cfg = flow_style.StyleConfig(
        iterations=args.iterations,
        learning_rate=args.lr,
        style_weight=args.style_weight,
        crop_size=args.crop,
        seed=args.seed,
    )
    pairs = dataset.assign_style_pairs(source, target, args.seed)
    net = flow_style.FlowNetwork(3, cfg.num_blocks, cfg.steps_per_block, cfg.hidden, cfg.seed)
    net, history = flow_style.train_style(net, source, target, pairs, cfg)
    out = _output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flow_style.save_checkpoint(net, out / "flow.pt", cfg)
    history.to_csv(out / "losses.csv")
    print(f"final content {history.content[-1]:.4f} style {history.style[-1]:.4f} -> {out / 'flow.pt'}")
    return 0


def cmd_style_apply(args) -> int:
    net, _ = flow_style.load_checkpoint(args.checkpoint)
    source, target = dataset.load_manifest(args.source), dataset.load_manifest(args.target)
    pairs = dataset.assign_style_pairs(source, target, args.seed)
    out = flow_style.stylize_dataset(net, source, target, pairs, _output(args.out))
    print(f"wrote {len(out.entries)} stylised images to {out.root}")
    return 0


def cmd_fda_apply(args) -> int:
    source, target = dataset.load_manifest(args.source), dataset.load_manifest(args.target)
    out = fda_swap.apply_to_manifest(
        source, target, fda_swap.SwapConfig(args.window), _output(args.out), seed=args.seed
    )
    print(f"wrote {len(out.entries)} swapped images to {out.root}")
    return 0


def _run(cfg: experiment.ExperimentConfig) -> int:
    experiment.apply_env(cfg)
    records = experiment.run_pipeline(cfg)
    names = dataset.load_manifest(cfg.target).class_names
    classes = list(range(len(names)))
    for rec in records:
        print(metrics.format_row(rec.label, rec.report, classes))
    rows = experiment.write_summary(records, cfg.output)
    for row in rows:
        print(f"{row['config']}: mean mIoU {100 * row['mean_miou']:.3f}  stability {100 * row['stability']:.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = experiment.load_config(args.config) if args.config else experiment.ExperimentConfig()
    if args.source:
        cfg.source, cfg.target = args.source, args.target
    if args.out:
        cfg.output = args.out
    cfg.blend = "random" if args.blend_total else "none"
    cfg.blend_total = args.blend_total or cfg.blend_total
    cfg.repeats, cfg.seeds = 1, [args.seed]
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    return _run(cfg)


def cmd_irb_run(args) -> int:
    cfg = experiment.load_config(args.config)
    return _run(cfg)


def cmd_report(args) -> int:
    out = _output(args.out)
    records = experiment.load_records(out / "records")
    rows = experiment.write_summary(records, out)
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    classes = sorted({c for r in records for c in r.report.iou_per_class})
    print(f"{'step':>10} | IoU per class {classes} | mIoU | Acc per class | mAcc")
    for rec in sorted(records, key=lambda r: (r.extra.get("group", ""), r.seed)):
        print(metrics.format_row(rec.label, rec.report, classes))
    print()
    print(f"{'config':>16} {'runs':>4} {'mIoU':>8} {'stability':>9} {'std':>7}")
    for row in rows:
        print(
            f"{row['config']:>16} {row['runs']:>4} {100 * row['mean_miou']:8.3f} "
            f"{100 * row['stability']:9.3f} {100 * row['std_miou']:7.3f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irbaf", description="IoU-ranking blend + flow style transfer experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-domain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--style-gap", type=float, default=0.8)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--source-counts", default="1:30,2:30,3:30", help="class:count,... per source image set")
    g.add_argument("--target-counts", default="1:30,2:20,3:25")
    g.set_defaults(func=cmd_gen_data)

    style = sub.add_parser("style", help="flow style transfer").add_subparsers(dest="style_cmd", required=True)
    st = style.add_parser("train")
    st.add_argument("--source", required=True)
    st.add_argument("--target", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--iterations", type=int, default=200)
    st.add_argument("--lr", type=float, default=1e-4)
    st.add_argument("--style-weight", type=float, default=1.0)
    st.add_argument("--crop", type=int, default=64)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_style_train)
    sa = style.add_parser("apply")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--source", required=True)
    sa.add_argument("--target", required=True)
    sa.add_argument("--out", required=True)
    sa.add_argument("--seed", type=int, default=0)
    sa.set_defaults(func=cmd_style_apply)

    fda = sub.add_parser("fda", help="Fourier amplitude swap").add_subparsers(dest="fda_cmd", required=True)
    fa = fda.add_parser("apply")
    fa.add_argument("--source", required=True)
    fa.add_argument("--target", required=True)
    fa.add_argument("--out", required=True)
    fa.add_argument("--window", type=float, default=0.1)
    fa.add_argument("--seed", type=int, default=0)
    fa.set_defaults(func=cmd_fda_apply)

    t = sub.add_parser("train", help="one seeded training run (no blend or random blend)")
    t.add_argument("--config")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--out")
    t.add_argument("--blend-total", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    irb = sub.add_parser("irb", help="full pipeline from an experiment file").add_subparsers(dest="irb_cmd", required=True)
    ir = irb.add_parser("run")
    ir.add_argument("--config", required=True)
    ir.set_defaults(func=cmd_irb_run)

    r = sub.add_parser("report", help="summarise records under an output directory")
    r.add_argument("--out", required=True)
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if os.environ.get(experiment.ENV_THREADS):
        import torch

        torch.set_num_threads(int(os.environ[experiment.ENV_THREADS]))
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
