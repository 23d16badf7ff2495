"""Command-line driver: gen-data, train, eval, detect, render.

Exit codes: 0 success, 1 usage or configuration problem, 2 data or file
problem, 3 numeric failure during computation. Output files are written
atomically; an aborted run never leaves a partial artifact.
"""

import argparse
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ._fsio import atomic_write_bytes, atomic_write_text
from .checkpoint import TrainState, generator_state, load_checkpoint, \
    save_checkpoint
from .config import ExperimentConfig, canonical_json, config_hash, load_config
from .data import DEFAULT_CLASS_NAMES, AnnotatedImage, load_dataset
from .errors import CheckpointError, ConfigError, DatasetError, DetectorError, \
    NumericError
from .evaluation import mean_ap, read_detections, write_csv_report, \
    write_detections, write_text_report
from .inference import detect_split
from .synthetic import generate_synthetic_dataset
from .training import alternate_train_4step, params_from_arrays, \
    snapshot_params

log = logging.getLogger(__name__)


def _load_experiment(args):
    exp = load_config(args.config) if args.config else ExperimentConfig()
    log.info("config hash %s", config_hash(exp))
    return exp


def _load_params(path, exp):
    state = load_checkpoint(path)
    expected = config_hash(exp)
    if state.config_hash and state.config_hash != expected:
        log.warning("checkpoint config hash %s differs from current %s",
                    state.config_hash[:12], expected[:12])
    return params_from_arrays(state.params), state


def _require_class_match(dataset, exp):
    if dataset.n_classes != exp.model.n_classes:
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes but the model is "
            f"configured for {exp.model.n_classes}")


def _cmd_gen_data(args):
    exp = _load_experiment(args)
    syn = exp.synthetic
    if args.seed is not None:
        syn = dataclasses.replace(syn, seed=args.seed)
    if args.scale_factor is not None:
        syn = syn.scaled(args.scale_factor)
    dataset, manifest = generate_synthetic_dataset(syn, args.out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test "
          f"images under {manifest.parent}")
    print(f"manifest: {manifest}")
    return 0


def _cmd_train(args):
    exp = _load_experiment(args)
    dataset = load_dataset(args.data)
    _require_class_match(dataset, exp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(exp)
    atomic_write_text(out / "config.json", canonical_json(exp) + "\n")
    rng = np.random.Generator(np.random.PCG64(args.seed))
    iters_done = {"n": 0}
    phase_order = list(exp.train.phase_iters)

    def phase_hook(phase, params):
        iters_done["n"] += phase_order.pop(0)
        state = TrainState(
            params=snapshot_params(params), velocity={},
            rng_state=generator_state(rng), iteration=iters_done["n"],
            phase=phase, config_hash=chash)
        save_checkpoint(state, out / f"checkpoint-{phase}.dkpt")

    result = alternate_train_4step(dataset.train, exp, rng, phase_hook=phase_hook)
    final = TrainState(
        params=snapshot_params(result.params), velocity={},
        rng_state=generator_state(rng), iteration=iters_done["n"],
        phase="det4", config_hash=chash)
    save_checkpoint(final, out / "checkpoint-final.dkpt")
    atomic_write_text(out / "loss_trace.json", json.dumps(
        {phase: [[i, v] for i, v in tr] for phase, tr in result.traces.items()},
        sort_keys=True) + "\n")
    for phase, trace in result.traces.items():
        tail = [v for _, v in trace[-50:]]
        print(f"{phase}: {len(trace)} iters, mean loss of last 50: "
              f"{float(np.mean(tail)):.4f}")
    print(f"final checkpoint: {out / 'checkpoint-final.dkpt'}")
    return 0


def _eval_rows(args, exp, dataset):
    images = dataset.split(args.split)
    if not images:
        raise DatasetError(f"split {args.split!r} is empty")
    if args.from_detections:
        records = read_detections(args.from_detections)
        ap = mean_ap(records, images, dataset.classes, exp.infer.eval_iou)
        label = str(exp.train.short_side)
        return [{"label": label, "map": ap.map, "per_class": ap.per_class_ap}], {}
    params, state = _load_params(args.checkpoint, exp)
    scales = (600, 800, 1000) if args.scale_sweep else (exp.train.short_side,)
    rows, dets_by_scale = [], {}
    for scale in scales:
        records = detect_split(images, params, exp, short_side=scale,
                               max_side=max(scale, exp.train.max_side))
        ap = mean_ap(records, images, dataset.classes, exp.infer.eval_iou)
        rows.append({"label": str(scale), "map": ap.map,
                     "per_class": ap.per_class_ap})
        dets_by_scale[scale] = records
        log.info("scale %d: mAP %.4f over %d detections",
                 scale, ap.map, len(records))
    return rows, dets_by_scale


def _cmd_eval(args):
    exp = _load_experiment(args)
    dataset = load_dataset(args.data)
    _require_class_match(dataset, exp)
    if not args.from_detections and not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --from-detections")
    if args.from_detections and args.scale_sweep:
        raise ConfigError("--scale-sweep cannot score a fixed detections file")
    rows, dets_by_scale = _eval_rows(args, exp, dataset)
    header = [
        f"config {config_hash(exp)}",
        f"source {'detections:' + str(args.from_detections) if args.from_detections else 'checkpoint:' + str(args.checkpoint)}",
        f"split {args.split}  iou {exp.infer.eval_iou:.2f}",
        "",
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text_report(out / "report.txt", rows, dataset.classes, header)
    write_csv_report(out / "report.csv", rows, dataset.classes)
    if args.detections:
        base = Path(args.detections)
        if len(dets_by_scale) == 1:
            write_detections(next(iter(dets_by_scale.values())), base)
        else:
            for scale, records in dets_by_scale.items():
                write_detections(records, base.with_name(
                    f"{base.stem}-{scale}{base.suffix}"))
    print((out / "report.txt").read_text(), end="")
    return 0


def _cmd_detect(args):
    exp = _load_experiment(args)
    params, _ = _load_params(args.checkpoint, exp)
    images = []
    for path in args.images:
        p = Path(path)
        if not p.is_file():
            raise DatasetError(f"image not found: {p}")
        with Image.open(p) as im:
            w, h = im.size
        images.append(AnnotatedImage(str(path), w, h, (), path=p))
    records = detect_split(images, params, exp)
    write_detections(records, args.out)
    print(f"wrote {len(records)} detections for {len(images)} images to {args.out}")
    return 0


_RENDER_COLORS = {1: (80, 150, 255), 2: (255, 170, 40), 3: (240, 70, 70),
                  4: (120, 230, 120)}


def _cmd_render(args):
    records = read_detections(args.detections)
    classes = dict(DEFAULT_CLASS_NAMES)
    if args.data:
        classes = load_dataset(args.data).classes
    by_image = {}
    for r in records:
        if r.score >= args.min_score:
            by_image.setdefault(r.image_id, []).append(r)
    root = Path(args.images_root)
    out = Path(args.out)
    n_drawn = 0
    for image_id, dets in sorted(by_image.items()):
        if Path(image_id).is_absolute():
            raise DatasetError(
                f"image id {image_id!r} is absolute; detections must carry "
                f"ids relative to --images-root (run detect from that "
                f"directory or pass relative paths)")
        src = root / image_id
        if not src.is_file():
            raise DatasetError(f"image not found under --images-root: {src}")
        with Image.open(src) as im:
            canvas = im.convert("RGB")
        draw = ImageDraw.Draw(canvas)
        for r in sorted(dets, key=lambda d: d.score):
            color = _RENDER_COLORS.get(r.class_id, (255, 255, 255))
            b = r.box
            draw.rectangle([b.x1, b.y1, b.x2, b.y2], outline=color, width=2)
            caption = f"{classes.get(r.class_id, r.class_id)} {r.score:.2f}"
            ty = b.y1 - 11 if b.y1 >= 11 else b.y2 + 1
            draw.text((b.x1 + 1, ty), caption, fill=color)
        target = out / image_id
        target.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        canvas.save(buf, format="PNG")
        atomic_write_bytes(target, buf.getvalue())
        n_drawn += 1
    print(f"rendered {n_drawn} images to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="defectdet",
        description="Two-stage detector for synthetic electrical-equipment scenes")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the dataset seed")
    p.add_argument("--scale-factor", type=float,
                   help="scale per-class image counts by this factor")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run 4-step alternating training")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a detector on a dataset split")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--from-detections",
                   help="score an existing detections file instead of a model")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--scale-sweep", action="store_true",
                   help="evaluate at short sides 600, 800, and 1000")
    p.add_argument("--detections", help="also write detection records here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("detect", help="emit detections for image files")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="detections JSONL path")
    p.add_argument("images", nargs="+", help="PNG images to run on")
    p.set_defaults(fn=_cmd_detect)

    p = sub.add_parser("render", help="draw detections onto image copies")
    p.add_argument("--detections", required=True, help="detections JSONL path")
    p.add_argument("--images-root", required=True,
                   help="directory that image ids are relative to")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset manifest (for class names)")
    p.add_argument("--min-score", type=float, default=0.5)
    p.set_defaults(fn=_cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except DetectorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
