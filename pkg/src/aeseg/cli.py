"""``aeseg`` command line: synth-gen, split, train, eval, predict, report.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .bayesinfer import McConfig, UncertaintyMaps, edge_interior_summary, mc_predict, read_raster, write_raster
from .chipdata import ChipFormatError, Split, load_entry, read_manifest, spatial_split, write_manifest
from .images import render_pseudo_rgb, to_u8, write_pgm, write_ppm
from .objective import ObjectiveConfig
from .segnet import CheckpointError, NonFiniteError, UNetConfig, load_checkpoint, save_checkpoint
from .synthfields import SynthConfig, bayes_accuracy, generate_dataset
from .trainer import TrainConfig, evaluate, train, write_history

log = logging.getLogger("aeseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SUMMARY_COLUMNS = ("chip_id", "class", "edge_median_var", "interior_median_var", "edge_pixels", "interior_pixels")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _ratios(text):
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return parts


def _triplet(text):
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("band triplet needs three comma-separated indices")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aeseg", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="write a synthetic chip dataset and manifest")
    p.add_argument("--chips", type=_positive_int, default=400, help="number of chips (default 400)")
    p.add_argument("--separation", type=float, default=1.0, help="signature distance (default 1.0)")
    p.add_argument("--noise", type=float, default=0.25, help="per-channel noise sigma (default 0.25)")
    p.add_argument("--height", type=int, default=64, help="chip height in pixels (default 64)")
    p.add_argument("--width", type=int, default=64, help="chip width in pixels (default 64)")
    p.add_argument("--edge-mix", type=int, default=2, help="mixed edge ring width (default 2)")
    p.add_argument("--margin", type=int, default=2, help="NoData frame width (default 2)")
    p.add_argument("--irregularity", type=float, default=0.5, help="field boundary irregularity in [0,1] (default 0.5)")
    p.add_argument("--region", type=float, default=100_000.0, help="side of the centroid square in m (default 100000)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", default="dataset", help="output directory (default ./dataset)")

    p = sub.add_parser("split", help="assign chips to train/val/test by spatial blocks")
    p.add_argument("--manifest", default="dataset/manifest.tsv", help="input manifest (default dataset/manifest.tsv)")
    p.add_argument("--ratios", type=_ratios, default=(0.70, 0.15, 0.15), help="train,val,test (default 0.7,0.15,0.15)")
    p.add_argument("--block", type=float, default=5000.0, help="block size in m (default 5000)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p.add_argument("--out", default=None, help="output directory (default: the manifest's directory)")

    p = sub.add_parser("train", help="train the U-Net on the train split, validating on val")
    p.add_argument("--manifest", default="dataset/manifest.tsv", help="split manifest (default dataset/manifest.tsv)")
    p.add_argument("--epochs", type=_positive_int, default=30, help="epochs (default 30)")
    p.add_argument("--batch-size", type=_positive_int, default=24, help="batch size (default 24)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 1e-3)")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="decoupled weight decay (default 1e-4)")
    p.add_argument("--base-width", type=_positive_int, default=32, help="U-Net base width (default 32)")
    p.add_argument("--depth", type=_positive_int, default=3, help="number of 2x downsamplings (default 3)")
    p.add_argument("--dropout", type=float, default=0.2, help="spatial dropout rate (default 0.2)")
    p.add_argument("--no-norm", action="store_true", help="disable channel normalisation")
    p.add_argument("--epsilon", type=float, default=1e-6, help="Dice smoothing constant (default 1e-6)")
    p.add_argument("--prob-clamp", type=float, default=1e-7, help="probability clamp inside logs (default 1e-7)")
    p.add_argument("--mixed-precision", action="store_true", help="accepted; training stays float32")
    p.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    p.add_argument("--out", default="run", help="output directory (default ./run)")

    p = sub.add_parser("eval", help="eval-mode metrics on one split")
    p.add_argument("--manifest", default="dataset/manifest.tsv", help="split manifest (default dataset/manifest.tsv)")
    p.add_argument("--checkpoint", default="run/checkpoint.aeunet", help="AEUNET1 file (default run/checkpoint.aeunet)")
    p.add_argument("--split", default="test", choices=[s.value for s in Split], help="split to score (default test)")
    p.add_argument("--threshold", type=float, default=0.5, help="positive-class threshold (default 0.5)")
    p.add_argument("--out", default="run", help="output directory (default ./run)")

    p = sub.add_parser("predict", help="MC dropout mean/variance rasters and previews")
    p.add_argument("--manifest", default="dataset/manifest.tsv", help="split manifest (default dataset/manifest.tsv)")
    p.add_argument("--checkpoint", default="run/checkpoint.aeunet", help="AEUNET1 file (default run/checkpoint.aeunet)")
    p.add_argument("--chip", action="append", default=None, help="chip id (repeatable); default: every chip in --split")
    p.add_argument("--split", default="test", choices=[s.value for s in Split], help="split when no --chip (default test)")
    p.add_argument("--passes", type=_positive_int, default=100, help="MC dropout passes (default 100)")
    p.add_argument("--bands", type=_triplet, default=(0, 1, 2), help="pseudo-RGB band triplet (default 0,1,2)")
    p.add_argument("--edge-distance", type=int, default=2, help="edge band width for summaries (default 2)")
    p.add_argument("--seed", type=int, default=0, help="base seed for pass seeds (default 0)")
    p.add_argument("--out", default="run/predictions", help="output directory (default ./run/predictions)")

    p = sub.add_parser("report", help="metrics and uncertainty summary from prediction rasters")
    p.add_argument("--manifest", default="dataset/manifest.tsv", help="split manifest (default dataset/manifest.tsv)")
    p.add_argument("--predictions", default="run/predictions", help="directory written by predict (default run/predictions)")
    p.add_argument("--split", default="test", choices=[s.value for s in Split], help="split to report (default test)")
    p.add_argument("--threshold", type=float, default=0.5, help="positive-class threshold (default 0.5)")
    p.add_argument("--edge-distance", type=int, default=2, help="edge band width (default 2)")
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    return parser


def _cmd_synth_gen(args) -> str:
    cfg = SynthConfig(
        chip_height=args.height,
        chip_width=args.width,
        edge_mix_width=args.edge_mix,
        margin_width=args.margin,
        field_irregularity=args.irregularity,
        noise_sigma=args.noise,
        separation=args.separation,
        seed=args.seed,
    )
    manifest, pair = generate_dataset(args.out, args.chips, cfg, region_extent=args.region)
    acc = bayes_accuracy(pair)
    return f"synth-gen: wrote {len(manifest)} chips to {args.out} (bayes_accuracy={acc:.6f})"


def _cmd_split(args) -> str:
    src = Path(args.manifest)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    manifest = spatial_split(read_manifest(src), args.ratios, args.block, args.seed)
    if out.resolve() != src.parent.resolve():
        entries = [
            replace(e, path=os.path.relpath(src.parent / e.path, out)) if not os.path.isabs(e.path) else e
            for e in manifest.entries
        ]
        manifest = replace(manifest, entries=entries)
    write_manifest(manifest, out / "manifest.tsv")
    c = manifest.counts()
    return f"split: train={c[Split.TRAIN]} val={c[Split.VAL]} test={c[Split.TEST]} -> {out / 'manifest.tsv'}"


def _cmd_train(args) -> str:
    manifest = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    cfg = TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        mixed_precision=args.mixed_precision,
        objective=ObjectiveConfig(args.epsilon, args.prob_clamp),
        unet=UNetConfig(64, args.base_width, args.depth, args.dropout, not args.no_norm),
    )
    params, history = train(cfg, manifest.subset(Split.TRAIN), manifest.subset(Split.VAL), root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.aeunet")
    write_history(history, out / "history.tsv")
    best = min(history, key=lambda r: r.val_loss)
    return f"train: {len(history)} epochs, best epoch {best.epoch} val_loss={best.val_loss:.6f} -> {out}"


def _cmd_eval(args) -> str:
    manifest = read_manifest(args.manifest).subset(args.split)
    params = load_checkpoint(args.checkpoint)
    rep = evaluate(params, manifest, args.threshold, Path(args.manifest).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.txt").write_text(rep.to_text())
    return f"eval: {args.split} pixel_accuracy={rep.pixel_accuracy:.6f} iou={rep.iou:.6f} chip_accuracy={rep.chip_accuracy:.6f}"


def _cmd_predict(args) -> str:
    manifest = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    if args.chip:
        by_id = {e.chip_id: e for e in manifest.entries}
        missing = [c for c in args.chip if c not in by_id]
        if missing:
            raise ValueError(f"unknown chip id(s): {', '.join(missing)}")
        entries = [by_id[c] for c in args.chip]
    else:
        entries = manifest.subset(args.split).entries
        if not entries:
            raise ValueError(f"split {args.split!r} is empty")
    params = load_checkpoint(args.checkpoint)
    mc = McConfig(passes=args.passes, base_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(SUMMARY_COLUMNS)]
    for entry in entries:
        chip, labels = load_entry(root, entry)
        maps = mc_predict(params, chip, mc)
        stem = out / chip.chip_id
        write_raster(maps.mean, maps.valid, f"{stem}.mean.aeras", int(chip.class_label))
        write_raster(maps.variance, maps.valid, f"{stem}.var.aeras", int(chip.class_label))
        write_pgm(to_u8(maps.mean, 0.0, 1.0, maps.valid), f"{stem}.mean.pgm")
        write_pgm(to_u8(maps.variance, 0.0, 0.25, maps.valid), f"{stem}.var.pgm")
        write_ppm(render_pseudo_rgb(chip, args.bands), f"{stem}.rgb.ppm")
        s = edge_interior_summary(maps, labels.labels, edge_distance=args.edge_distance)
        rows.append(
            # variances of a confident model sit near 1e-6, so keep significant digits
            f"{chip.chip_id}\t{chip.class_label.tag}\t{s['edge_median_var']:.6e}\t"
            f"{s['interior_median_var']:.6e}\t{s['edge_pixel_count']}\t{s['interior_pixel_count']}"
        )
    (out / "uncertainty.tsv").write_text("\n".join(rows) + "\n")
    return f"predict: {len(entries)} chip(s), T={args.passes} -> {out}"


def _cmd_report(args) -> str:
    manifest = read_manifest(args.manifest).subset(args.split)
    if not manifest.entries:
        raise ValueError(f"split {args.split!r} is empty")
    root = Path(args.manifest).parent
    pred = Path(args.predictions)
    means, labels, masks = [], [], []
    edge_wins = 0
    for entry in manifest.entries:
        _, lab = load_entry(root, entry)
        mean, valid = read_raster(pred / f"{entry.chip_id}.mean.aeras")
        var, _ = read_raster(pred / f"{entry.chip_id}.var.aeras")
        if not np.array_equal(valid, lab.valid):
            raise ValueError(f"{entry.chip_id}: prediction mask does not match the chip")
        means.append(mean.astype(np.float64))
        labels.append(lab.labels)
        masks.append(valid)
        s = edge_interior_summary(UncertaintyMaps(mean, var, valid), lab.labels, edge_distance=args.edge_distance)
        edge_wins += s["edge_median_var"] > s["interior_median_var"]
    rep = metrics.report(means, labels, masks, args.threshold)
    frac = edge_wins / len(manifest.entries)
    text = rep.to_text() + f"edge_gt_interior_fraction={frac:.6f}\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{args.split}.txt").write_text(text)
    return f"report: {args.split} n={rep.n_chips} pixel_accuracy={rep.pixel_accuracy:.6f} edge>interior on {frac:.1%} of chips"


COMMANDS = {
    "synth-gen": _cmd_synth_gen,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "report": _cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"aeseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"aeseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ChipFormatError, CheckpointError, OSError, RuntimeError) as exc:
        print(f"aeseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(summary)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
