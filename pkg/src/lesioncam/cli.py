"""``lesioncam`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import namedtuple
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import cam as cam_ops
from . import data
from .errors import LesionCamError, UsageError
from .evaluation import AucReport, report_from_files
from .hair_removal import remove_hairs
from .network import load_weights, save_weights
from .pipeline import (
    PipelineConfig,
    deterministic_mode,
    load_config,
    load_networks,
    preprocess,
    run_stage1,
    run_two_stage,
    stage2_input,
    train_stage1,
    train_stage2,
    write_predictions,
)

log = logging.getLogger("lesioncam")

_Row = namedtuple("_Row", "image_id probs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _inputs(args):
    """(image_id, path, label-or-None) triples from --in paths or a --manifest."""
    if getattr(args, "manifest", None):
        m = data.read_manifest(args.manifest)
        return [(e.image_id, e.path, e.label) for e in m]
    if not getattr(args, "inputs", None):
        raise UsageError("give --in IMAGE [IMAGE ...] or --manifest CSV")
    return [(Path(p).stem, Path(p), None) for p in args.inputs]


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = replace(
            config,
            network=replace(config.network, seed=args.seed),
            train=replace(config.train, seed=args.seed),
        )
    for key in ("stage1_weights", "stage2_weights"):
        if getattr(args, key, None):
            config = replace(config, **{key: Path(getattr(args, key))})
    if getattr(args, "cam_class", None) is not None:
        config = replace(config, cam_class=args.cam_class)
    return config


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, config):
    spec = data.SyntheticSpec(args.size, args.per_class, args.hair_density, args.seed or 0)
    samples = data.generate_synthetic(spec)
    out = Path(args.out)
    manifest = data.save_synthetic(samples, out, args.format)
    if args.val_fraction:
        train_m, val_m = data.split(manifest, (1 - args.val_fraction, args.val_fraction), args.seed or 0)
        data.write_manifest(train_m, out / "train_manifest.csv")
        data.write_manifest(val_m, out / "val_manifest.csv")
        data.write_labels(val_m.labels, out / "val_labels.csv")
    print(f"wrote {len(samples)} images to {out}")


def cmd_preprocess(args, config):
    params = replace(
        config.hair,
        **{k: v for k, v in dict(
            se_length=args.se_length, diff_threshold=args.threshold, min_length=args.min_length,
            max_mean_width=args.max_width, median_max_window=args.median_window,
        ).items() if v is not None},
    )
    image = data.decode_image(args.inp)
    cleaned, mask = remove_hairs(image, params)
    data.encode_image(cleaned, args.out)
    if args.mask:
        data.encode_image(mask.astype(np.uint8) * 255, args.mask)
    print(f"{int(mask.sum())} hair pixels replaced")


def cmd_augment(args, config):
    policy = config.augment
    if args.rotations is not None:
        policy = replace(policy, rotations=tuple(int(r) for r in args.rotations.split(",")))
    if args.hflip:
        policy = replace(policy, hflip=True)
    if args.five_crop:
        policy = replace(policy, five_crop=args.five_crop)
    policy = aug.AugmentPolicy(policy.rotations, policy.hflip, policy.five_crop)
    manifest = data.read_manifest(args.manifest)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest:
        image = data.decode_image(e.path)
        for v in aug.variants(policy):
            image_id = e.image_id + v.suffix()
            path = out / "images" / f"{image_id}{e.path.suffix}"
            data.encode_image(aug.apply_variant(image, v, policy), path)
            entries.append(data.ManifestEntry(path, replace(e.label, image_id=image_id)))
    data.write_manifest(data.DatasetManifest(out, entries), out / "manifest.csv")
    print(f"wrote {len(entries)} images ({policy.multiplier} per source) to {out}")


def _load_training_set(args, config):
    manifest = data.read_manifest(args.manifest)
    images = [preprocess(data.decode_image(e.path), config) for e in manifest]
    labels = np.array([e.class_id for e in manifest])
    return images, labels


def cmd_train(args, config):
    if args.epochs is not None or args.lr is not None:
        config = replace(config, train=replace(
            config.train,
            **({"epochs": args.epochs} if args.epochs is not None else {}),
            **({"lr": args.lr} if args.lr is not None else {}),
        ))
    if config.stage1_weights is None:
        raise UsageError("train needs --stage1-weights (or pipeline.stage1_weights in the config)")
    if args.stage in ("2", "both") and config.stage2_weights is None:
        raise UsageError("stage 2 training needs --stage2-weights")
    images, labels = _load_training_set(args, config)

    def progress(epoch, loss):
        print(f"epoch {epoch} loss {loss:.6f}")

    if args.stage in ("1", "both"):
        net1, _ = train_stage1(images, labels, config, progress)
        save_weights(net1, config.stage1_weights)
    else:
        net1 = load_weights(config.stage1_weights, config.network)
    if args.stage in ("2", "both"):
        net2, _ = train_stage2(images, labels, net1, config, progress)
        save_weights(net2, config.stage2_weights)


def cmd_infer(args, config):
    net = load_weights(args.weights, config.network)
    rows = []
    for image_id, path, _ in _inputs(args):
        s1 = run_stage1(data.decode_image(path), net, config)
        rows.append(_Row(image_id, s1.probs))
    _emit_predictions(rows, args.out)


def _emit_predictions(rows, out):
    if out:
        write_predictions(rows, out)
    else:
        print("image_id,p_mel,p_sk,p_nevus")
        for r in rows:
            print(r.image_id + "," + ",".join(f"{float(p):.6f}" for p in r.probs))


def cmd_cam(args, config):
    net = load_weights(args.weights, config.network)
    s1 = run_stage1(data.decode_image(args.inp), net, config)
    print(f"class {s1.cam.class_id} probs " + " ".join(f"{p:.6f}" for p in s1.probs))
    if args.heatmap:
        cam_ops.save_heatmap_pgm(s1.heatmap, args.heatmap)
    if args.overlay:
        data.encode_image(cam_ops.render_overlay(s1.image, s1.heatmap, args.alpha), args.overlay)
    if args.bbox or args.crop or args.mask:
        region, _ = stage2_input(s1, config)
        if args.bbox:
            Path(args.bbox).write_text(f"{region.bbox}\n")
        if args.crop:
            data.encode_image(region.crop, args.crop)
        if args.mask:
            data.encode_image(region.mask.astype(np.uint8) * 255, args.mask)


def cmd_pipeline(args, config):
    net1, net2 = load_networks(config)
    records = [
        run_two_stage(data.decode_image(path), net1, net2, config, image_id)
        for image_id, path, _ in _inputs(args)
    ]
    _emit_predictions(records, args.out)


def cmd_eval(args, config):
    rep = report_from_files(args.pred, args.truth)
    print(rep)
    if args.out:
        Path(args.out).write_text(f"{AucReport.CSV_HEADER}\n{rep.csv_row()}\n")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="lesioncam", description="Two-stage CAM skin-lesion classifier")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dermoscopy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--hair-density", type=int, default=0)
    s.add_argument("--val-fraction", type=float, default=0.0)
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="remove dark hairs from an image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask")
    s.add_argument("--se-length", type=int)
    s.add_argument("--threshold", type=int)
    s.add_argument("--min-length", type=int)
    s.add_argument("--max-width", type=float)
    s.add_argument("--median-window", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", help="materialize an augmented copy of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rotations", help="comma-separated quarter turns, e.g. 0,1,2")
    s.add_argument("--hflip", action="store_true")
    s.add_argument("--five-crop", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train stage 1, stage 2, or both")
    s.add_argument("--manifest", required=True)
    s.add_argument("--stage", choices=("1", "2", "both"), default="both")
    s.add_argument("--stage1-weights")
    s.add_argument("--stage2-weights")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="stage-1 probabilities")
    s.add_argument("--weights", required=True)
    s.add_argument("--in", dest="inputs", nargs="+")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("cam", help="class activation map outputs for one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--cam-class", type=int)
    s.add_argument("--heatmap", help="PGM output")
    s.add_argument("--overlay", help="PNG output")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--bbox", help="text output 'x0 y0 x1 y1'")
    s.add_argument("--crop", help="PNG output")
    s.add_argument("--mask", help="PGM output of the thresholded heatmap")
    s.set_defaults(func=cmd_cam)

    s = sub.add_parser("pipeline", help="two-stage prediction to a predictions CSV")
    s.add_argument("--in", dest="inputs", nargs="+")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--stage1-weights")
    s.add_argument("--stage2-weights")
    s.add_argument("--cam-class", type=int)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval", help="M/SK/AVG AUC report")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", help="CSV report output")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = _config(args)
        with deterministic_mode(args.deterministic):
            args.func(args, config)
    except LesionCamError as exc:
        print(f"lesioncam: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"lesioncam: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"lesioncam: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
