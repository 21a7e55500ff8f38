"""``fpaenet`` command line: train, eval, detect, gradcheck, ablate.

Exit codes: 0 success, 1 usage, 2 validation failure, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import checkpoint
from . import config as config_mod
from .checkpoint import CheckpointError
from .config import ConfigError
from .data import DatasetError, DatasetManifest, load_dataset, read_image, resize_image, split_dataset, \
    synthetic_dataset
from .evaluate import EvaluationError
from .model import predict
from .train import NumericError, evaluate_model, train

log = logging.getLogger("fpaenet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_ROWS = (
    (True, False, False),
    (True, True, False),
    (True, True, True),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.load("preset:default")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "strict", False):
        cfg = cfg.replace(**{"data.strict": True})
    if getattr(args, "lenient", False):
        cfg = cfg.replace(**{"data.strict": False})
    return cfg


def resolve_dataset(dataset, cfg):
    """Return ``(manifest, samples)`` for a dataset argument.

    ``None`` or ``"synthetic"`` generates from ``cfg.data``; a directory must
    hold ``annotations.csv`` and the images; a ``.csv`` path reads images from
    the same directory.
    """
    size = cfg.backbone.input_size
    if dataset in (None, "synthetic"):
        samples = synthetic_dataset(cfg.data, size)
        d = cfg.data
        source = {"kind": "synthetic", "seed": d.seed, "count": d.count,
                  "lesions": [d.lesions_min, d.lesions_max], "contrast": [d.contrast_min, d.contrast_max],
                  "size": [d.size_min, d.size_max]}
        manifest = DatasetManifest(source=source, ids=[s.image_id for s in samples])
    else:
        if os.path.isdir(dataset):
            image_dir, csv_path = dataset, os.path.join(dataset, "annotations.csv")
        else:
            image_dir, csv_path = os.path.dirname(dataset) or ".", dataset
        if not os.path.exists(csv_path):
            raise DatasetError([f"no annotations file at {csv_path}"])
        manifest, samples, skipped = load_dataset(image_dir, csv_path, size, cfg.data.extension, cfg.data.strict)
        if skipped:
            log.warning("skipped %d problem row(s)/image(s) in lenient mode", skipped)
    if len(samples) >= 2:
        manifest = split_dataset(manifest, cfg.data.test_fraction, cfg.seed)
    return manifest, samples


def select(samples, manifest, split):
    if split == "all":
        return list(samples)
    if split not in manifest.splits:
        raise DatasetError([f"dataset of {len(samples)} image(s) has no {split!r} split"])
    wanted = set(manifest.splits[split])
    return [s for s in samples if s.image_id in wanted]


def _emit(text, out=None):
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _train_and_eval(cfg, samples, manifest, split, out_dir, name=""):
    train_set = select(samples, manifest, split)
    eval_set = train_set if split == "all" else select(samples, manifest, "test")
    ckpt_path = os.path.join(out_dir, f"{name}checkpoint.fpae")

    def progress(step, value, parts):
        if step % 50 == 0:
            log.info("step %d loss %.5f (cls %.5f, box %.5f)", step, value, parts["cls"], parts["box"])

    model, _, record = train(cfg, train_set, checkpoint_path=ckpt_path, on_step=progress)
    report = evaluate_model(model, eval_set)
    record.eval_report = report.to_dict()
    with open(os.path.join(out_dir, f"{name}run_record.json"), "w", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
    return model, record, report


def cmd_train(args):
    cfg = _load_config(args)
    manifest, samples = resolve_dataset(args.dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest.save(os.path.join(args.out, "manifest.json"))
    _, record, report = _train_and_eval(cfg, samples, manifest, args.split, args.out)
    summary = {"checkpoint": record.checkpoint, "steps": len(record.losses),
               "first_loss": record.losses[0], "final_loss": record.losses[-1],
               "wall_time": record.wall_time, "map": report.map, "protocol": record.protocol}
    _emit(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    model, ckpt = checkpoint.load_model(args.checkpoint)
    cfg = ckpt.config
    if args.config:
        requested = _load_config(args)
        mismatch = config_mod.arch_diff(ckpt.config, requested)
        if mismatch:
            lines = [f"  {k}: checkpoint={a} config={b}" for k, a, b in mismatch]
            raise ConfigError("config does not match checkpoint:\n" + "\n".join(lines))
        cfg = requested
        model.cfg = cfg
    manifest, samples = resolve_dataset(args.dataset, cfg)
    subset = select(samples, manifest, args.split)
    if not subset:
        raise EvaluationError(f"{args.split!r} split is empty")
    report = evaluate_model(model, subset)
    _emit(report.to_json(), args.out)
    return EXIT_OK


def draw_overlay(pixels, detections, scale_x, scale_y, path):
    from PIL import Image, ImageDraw

    im = Image.fromarray(pixels, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)
    for d in detections:
        x, y, w, h = d.box
        draw.rectangle([x * scale_x, y * scale_y, (x + w) * scale_x, (y + h) * scale_y], outline=(255, 0, 0))
    im.save(path)


def cmd_detect(args):
    model, _ = checkpoint.load_model(args.checkpoint)
    try:
        pixels = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise DatasetError([f"cannot read image {args.image}: {exc}"]) from exc
    size = model.cfg.backbone.input_size
    image = resize_image(pixels, size)
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    dets = predict(model, image[None], [image_id])[0]
    nh, nw = pixels.shape
    payload = {"image": args.image, "input_size": size, "count": len(dets),
               "detections": [d.to_dict() for d in dets]}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        draw_overlay(pixels, dets, nw / size, nh / size, args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    from .diagnostics import format_table, run_suite

    results, seconds = run_suite(points=args.points, seed=args.seed or 0, fault=args.inject_fault)
    print(format_table(results))
    print(f"runtime {seconds:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def ablation_configs(cfg):
    keys = ("neck.new_channels", "neck.enhancement", "neck.attention")
    return [cfg.replace(**dict(zip(keys, row))) for row in ABLATION_ROWS]


def cmd_ablate(args):
    cfg = _load_config(args)
    manifest, samples = resolve_dataset(args.dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, row_cfg in enumerate(ablation_configs(cfg), 1):
        _, record, report = _train_and_eval(row_cfg, samples, manifest, args.split, args.out, f"row{i}_")
        n = row_cfg.neck
        rows.append({"new_channels": n.new_channels, "enhancement": n.enhancement, "attention": n.attention,
                     "parameters": record.num_parameters, "map": report.map,
                     "final_loss": record.losses[-1]})
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    print(format_ablation(rows))
    return EXIT_OK


def format_ablation(rows):
    mark = {True: "yes", False: ""}
    lines = [f"{'New Channels':>12} | {'Enhancement':>11} | {'Attention':>9} | {'params':>8} | mAP"]
    for r in rows:
        lines.append(f"{mark[r['new_channels']]:>12} | {mark[r['enhancement']]:>11} | "
                     f"{mark[r['attention']]:>9} | {r['parameters']:>8} | {100 * r['map']:.2f}%")
    return "\n".join(lines)


def build_parser():
    p = _Parser(prog="fpaenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="config file or preset:<name>")
        sp.add_argument("--seed", type=int)
        if dataset:
            sp.add_argument("--dataset", help="directory with annotations.csv, a CSV path, or 'synthetic'")
            sp.add_argument("--strict", action="store_true", help="abort on any dataset problem")
            sp.add_argument("--lenient", action="store_true", help="skip dataset problems and count them")

    sp = sub.add_parser("train", help="train a detector")
    common(sp)
    sp.add_argument("--out", default="runs/train")
    sp.add_argument("--split", choices=("train", "all"), default="train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--out", help="also write the report here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("detect", help="detect lesions in one image")
    sp.add_argument("image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="write an overlay image here")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--inject-fault", choices=("relu", "sigmoid"), help="corrupt one gradient rule")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and compare the three ablation rows")
    common(sp)
    sp.add_argument("--out", default="runs/ablate")
    sp.add_argument("--split", choices=("train", "all"), default="train")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, EvaluationError, ValueError) as exc:
        print(f"fpaenet: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError) as exc:
        print(f"fpaenet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

