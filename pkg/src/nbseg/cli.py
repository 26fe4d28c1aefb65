"""Command-line entry point: ``nbseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, masks, metrics, nbnet, pipeline, plotting, selftest, stain, synthetic
from .augment import random_augment
from .config import format_config, load_config
from .errors import NBSegError
from .postproc import overlay_rgb
from .tensorcore import make_rng

log = logging.getLogger("nbseg")

AUGMENTATIONS = ("elastic", "rotate", "flip", "shift", "rescale")


class CliError(Exception):
    """Failure reported as a one-line diagnostic and exit status 1."""


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _require_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {p}")
    return p


def _images(directory, what):
    # label/mask/probability companions living next to the images are not inputs
    files = [f for f in io.list_images(_require_dir(directory, what)) if io.base_stem(f) == f.stem]
    if not files:
        raise CliError(f"no images in {what} directory {directory}")
    return files


# ---------------------------------------------------------------------------
# subcommands


def cmd_normalize(args):
    target_path = _require_file(args.target, "target")
    if target_path.suffix.lower() == ".txt":
        target = stain.StainProfile.from_text(target_path.read_text(encoding="utf-8"))
    else:
        target = stain.estimate_stain_profile(io.read_rgb(target_path))
    out = _out_dir(args.out)
    (out / "target_profile.txt").write_text(target.to_text(), encoding="utf-8")
    for f in _images(args.inp, "input"):
        try:
            img = stain.normalize(io.read_rgb(f), target)
        except NBSegError as exc:
            raise CliError(f"{f}: {exc}") from exc
        io.write_rgb(out / f"{f.stem}.png", img)
        log.info("normalized %s", f.name)
    return 0


def cmd_make_masks(args):
    cfg = load_config(args.config)
    ann_dir = _require_dir(args.annotations, "annotations")
    files = sorted(ann_dir.glob("*.txt"))
    if not files:
        raise CliError(f"no .txt annotation files in {ann_dir}")
    out = _out_dir(args.out)
    for f in files:
        if args.images:
            try:
                h, w = io.read_rgb(io.find_partner(args.images, f.stem, ("",))).shape[:2]
            except FileNotFoundError as exc:
                raise CliError(str(exc)) from exc
        elif args.width and args.height:
            h, w = args.height, args.width
        else:
            raise CliError("make-masks needs --images DIR or both --width and --height")
        try:
            polys = masks.parse_annotation_text(f.read_text(encoding="utf-8"))
            labels, overlap = masks.rasterize_annotations(polys, w, h, return_overlap=True)
        except NBSegError as exc:
            raise CliError(f"{f}: {exc}") from exc
        io.write_labels(out / f"{f.stem}{io.LABEL_SUFFIX}.png", labels)
        io.write_mask(out / f"{f.stem}{io.MASK_SUFFIX}.png",
                      masks.instance_to_ternary(labels, cfg.boundary_width, overlap=overlap))
    return 0


def cmd_augment_preview(args):
    cfg = load_config(args.config, {"seed": args.seed})
    img = io.read_rgb(_require_file(args.image, "image"))
    tgt = io.read_target(_require_file(args.mask, "mask"))
    if tgt.shape[:2] != img.shape[:2]:
        raise CliError(f"mask {args.mask} is {tgt.shape[1]}x{tgt.shape[0]}, image is {img.shape[1]}x{img.shape[0]}")
    out = _out_dir(args.out)
    params = cfg.augment()
    pairs = [(img, tgt)]
    for k in range(args.count):
        a_img, a_tgt = random_augment(img, tgt, params, make_rng(cfg.seed, k))
        io.write_rgb(out / f"aug_{k}.png", a_img)
        io.write_mask(out / f"aug_{k}{io.MASK_SUFFIX}.png", a_tgt)
        pairs.append((a_img, a_tgt))
    io.write_rgb(out / "original.png", img)
    io.write_mask(out / f"original{io.MASK_SUFFIX}.png", tgt)
    plotting.augment_grid(pairs, out / "preview.png")
    return 0


def _load_pairs(image_dir, mask_dir, what):
    images, targets = [], []
    for f in _images(image_dir, what):
        try:
            m = io.find_partner(_require_dir(mask_dir, f"{what} mask"), io.base_stem(f))
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from exc
        img = io.read_rgb(f).astype(np.float32)
        tgt = io.read_target(m)
        if tgt.shape[:2] != img.shape[:2]:
            raise CliError(f"{m} does not match the size of {f}")
        images.append(img)
        targets.append(tgt)
    return images, targets


def cmd_train(args):
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "patches_per_epoch": args.patches_per_epoch, "base_channels": args.base_channels,
        "depth": args.depth, "class_scheme": args.class_scheme, "learning_rate": args.learning_rate,
    }
    for name in AUGMENTATIONS:
        if getattr(args, f"no_{name}"):
            overrides[name] = False
    cfg = load_config(args.config, overrides)
    images, targets = _load_pairs(args.images, args.masks, "training")
    dataset = nbnet.PatchDataset(images, targets, cfg.input_size)
    val = None
    if args.val_images:
        if not args.val_masks:
            raise CliError("--val-images needs --val-masks")
        val = nbnet.PatchDataset(*_load_pairs(args.val_images, args.val_masks, "validation"), cfg.input_size)
    if args.init:
        model = nbnet.load_checkpoint(_require_file(args.init, "initial checkpoint"))
    else:
        model = nbnet.build_network(cfg.network())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_suffix(".loss.csv")

    history = []

    def on_epoch(rec):
        # rewritten every epoch so an interrupted run keeps its curve
        history.append(rec)
        history_path.write_text(nbnet.history_csv(history), encoding="utf-8")

    t0 = time.perf_counter()
    nbnet.train(model, dataset, cfg.training(), val_dataset=val, augment_params=cfg.augment(), callback=on_epoch)
    nbnet.save_checkpoint(model, out)
    history_path.write_text(nbnet.history_csv(history), encoding="utf-8")
    enabled = [n for n in AUGMENTATIONS if getattr(cfg, n)]
    plotting.loss_curves(history, history_path.with_suffix(".png"),
                         title="augmentation: " + (", ".join(enabled) or "none"))
    out.with_suffix(".config.txt").write_text(format_config(cfg), encoding="utf-8")
    log.info("trained %d epochs in %.1f s", cfg.epochs, time.perf_counter() - t0)
    return 0


def cmd_predict(args):
    cfg = load_config(args.config, {"stride": args.stride})
    model = nbnet.load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    boundary = nbnet.load_checkpoint(_require_file(args.boundary_ckpt, "boundary checkpoint")) if args.boundary_ckpt else None
    if boundary is not None and (model.config.class_scheme, boundary.config.class_scheme) != ("binary_inside", "binary_boundary"):
        raise CliError("--boundary-ckpt needs a binary_inside --ckpt and a binary_boundary boundary model")
    out = _out_dir(args.out)
    for f in _images(args.inp, "input"):
        img = io.read_rgb(f)
        t0 = time.perf_counter()
        probs, labels = pipeline.predict_image(model, img, cfg.stride, cfg.postproc(), args.batch_size, args.jobs, boundary)
        stem = io.base_stem(f)
        io.write_labels(out / f"{stem}{io.LABEL_SUFFIX}.png", labels)
        io.write_probs(out / f"{stem}_prob.png", probs)
        io.write_rgb(out / f"{stem}_overlay.png", overlay_rgb(labels, img, seed=cfg.seed))
        log.info("%s: %d nuclei in %.1f s", f.name, labels.max(), time.perf_counter() - t0)
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    all_gt = io.list_images(_require_dir(args.gt, "ground truth"))
    gt_files = [f for f in all_gt if f.stem.endswith(io.LABEL_SUFFIX)] or all_gt
    if not gt_files:
        raise CliError(f"no label images in ground truth directory {args.gt}")
    rows = {}
    for g in gt_files:
        stem = io.base_stem(g)
        try:
            p = io.find_partner(_require_dir(args.pred, "prediction"), stem, (io.LABEL_SUFFIX, ""))
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from exc
        gt, pred = io.read_labels(g), io.read_labels(p)
        if gt.shape != pred.shape:
            raise CliError(f"{p} is {pred.shape}, ground truth {g} is {gt.shape}")
        rows[stem] = metrics.evaluate_pair(gt, pred, cfg.match_threshold, cfg.md_overlap_threshold)
    report = metrics.format_report(rows)
    rp = Path(args.report)
    rp.parent.mkdir(parents=True, exist_ok=True)
    rp.write_text(report, encoding="utf-8")
    plotting.error_rates(rows, Path(args.figure) if args.figure else rp.with_suffix(".png"))
    print(report.splitlines()[-1])
    return 0


def cmd_synth(args):
    """Synthetic H&E tiles with their label maps and ternary masks."""
    images = _out_dir(args.out)
    for k in range(args.count):
        img, labels = synthetic.synthetic_tile(args.size, args.nuclei, seed=args.seed + k)
        stem = f"synth_{args.seed + k:04d}"
        io.write_rgb(images / f"{stem}.png", img)
        io.write_labels(images / f"{stem}{io.LABEL_SUFFIX}.png", labels)
        io.write_mask(images / f"{stem}{io.MASK_SUFFIX}.png", masks.instance_to_ternary(labels))
    return 0


def cmd_selftest(args):
    failed = 0
    for name, ok, detail in selftest.run_all(args.seed or 0):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    print(f"{failed} failed" if failed else "all checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbseg", description="Nucleus-boundary segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("normalize", help="stain-normalize images to a target image or profile")
    s.add_argument("--target", required=True, help="target image, or a saved profile (.txt)")
    s.add_argument("--in", dest="inp", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("make-masks", help="rasterize polygon annotations into label maps and ternary masks")
    s.add_argument("--annotations", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--images", metavar="DIR", help="take image sizes from same-stem images")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--config", metavar="FILE")
    s.set_defaults(func=cmd_make_masks)

    s = sub.add_parser("augment-preview", help="write augmented copies of one image/mask pair")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--config", metavar="FILE")
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("train", help="train a network and write a checkpoint plus loss history")
    s.add_argument("--config", metavar="FILE")
    s.add_argument("--images", required=True, metavar="DIR")
    s.add_argument("--masks", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="CKPT")
    s.add_argument("--val-images", metavar="DIR")
    s.add_argument("--val-masks", metavar="DIR")
    s.add_argument("--init", metavar="CKPT", help="continue from this checkpoint")
    s.add_argument("--history", metavar="CSV", help="loss CSV path (default: CKPT with .loss.csv)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patches-per-epoch", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--class-scheme", choices=nbnet.CLASS_SCHEMES)
    s.add_argument("--learning-rate", type=float)
    for name in AUGMENTATIONS:
        s.add_argument(f"--no-{name}", action="store_true", help=f"disable {name} augmentation")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment every image in a directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--boundary-ckpt", help="binary boundary model to merge with a binary inside model")
    s.add_argument("--in", dest="inp", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--stride", type=int)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--jobs", type=int, default=1, help="inference worker threads")
    s.add_argument("--config", metavar="FILE")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    s.add_argument("--gt", required=True, metavar="DIR")
    s.add_argument("--pred", required=True, metavar="DIR")
    s.add_argument("--report", required=True, metavar="FILE")
    s.add_argument("--figure", metavar="PNG")
    s.add_argument("--config", metavar="FILE")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write synthetic image/label/mask fixtures")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--nuclei", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("selftest", help="run the built-in gradient and oracle checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage and the offending token
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, NBSegError, FileNotFoundError, OSError) as exc:
        print(f"nbseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
