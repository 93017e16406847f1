"""Command-line surface: data preparation and synthesis, training,
evaluation, box-count sweeps, single-image inference, and report rendering.

Every command resolves one flat config (file, then flag overrides, then
defaults), echoes the resolved config next to its outputs, and uses stable
exit codes: 0 success, 2 input or validation error, 3 runtime or numeric
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import plots, train
from .data import CLASS_NAMES
from .errors import ConfigError, DataValidationError, TrainingError
from .rle import decode_rle

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


def _echo_config(cfg: dict, target: Path, stem: str = "config") -> None:
    target.mkdir(parents=True, exist_ok=True)
    config_mod.write_config(cfg, target / f"{stem}.echo")


def _class_table(title: str, columns, rows) -> str:
    """rows: (class_id, value, value, ...) keyed to columns after the name."""
    name_w = max(len(n) for n in CLASS_NAMES.values()) + 2
    head = f"{'class':>5}  {'defect type':<{name_w}}" + "".join(
        f"{c:>12}" for c in columns)
    lines = [title, head, "-" * len(head)]
    for row in rows:
        cid, values = row[0], row[1:]
        name = CLASS_NAMES.get(cid, "?") if isinstance(cid, int) else ""
        label = cid if isinstance(cid, str) else str(cid)
        lines.append(f"{label:>5}  {name:<{name_w}}" + "".join(
            f"{v:>12}" if isinstance(v, (int, str)) else f"{v:>12.4f}"
            for v in values))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands

def cmd_prepare_data(args, cfg) -> int:
    src_images = Path(args.images)
    ann_path = Path(args.annotations)
    out = Path(args.out)
    if not src_images.is_dir():
        raise DataValidationError(f"image directory {src_images} not found")
    if not ann_path.is_file():
        raise DataValidationError(f"annotation file {ann_path} not found")

    with open(ann_path, encoding="utf-8") as fh:
        blob = json.load(fh)

    image_dir = out / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    if args.to_jpg:
        report = data_mod.convert_images(src_images, image_dir)
        if report.errors:
            for name, problem in report.errors:
                print(f"conversion failed for {name}: {problem}", file=sys.stderr)
            return EXIT_INPUT
        for entry in blob.get("images", []):
            entry["file_name"] = str(Path(entry["file_name"]).with_suffix(".jpg"))
        print(f"converted {report.converted} images to JPEG")
    else:
        missing = []
        for entry in blob.get("images", []):
            src = src_images / entry["file_name"]
            if not src.is_file():
                missing.append((entry.get("id"), entry["file_name"]))
                continue
            shutil.copy2(src, image_dir / entry["file_name"])
        if missing:
            for image_id, name in missing:
                print(f"image_id {image_id}: missing image file {name}",
                      file=sys.stderr)
            return EXIT_INPUT

    out_ann = out / "annotations.json"
    with open(out_ann, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)
    split_arg = None
    if args.split:
        shutil.copy2(args.split, out / "split.json")
        split_arg = out / "split.json"

    try:
        ds = data_mod.load_dataset(out_ann, image_dir, split_arg)
        ds.validate()
    except DataValidationError as exc:
        print(f"dataset validation failed:\n{exc}", file=sys.stderr)
        return EXIT_INPUT

    hist_train = data_mod.class_histogram(ds, "train")
    hist_val = (data_mod.class_histogram(ds, "val") if ds.val_ids
                else {c: 0 for c in CLASS_NAMES})
    rows = [(c, hist_train[c], hist_val[c]) for c in sorted(CLASS_NAMES)]
    rows.append(("total", sum(hist_train.values()), sum(hist_val.values())))
    print(_class_table("images per defect class", ("train", "val"), rows))
    with open(out / "class_counts.json", "w", encoding="utf-8") as fh:
        json.dump({"train": {str(k): v for k, v in hist_train.items()},
                   "val": {str(k): v for k, v in hist_val.items()}}, fh, indent=2)
    _echo_config(cfg, out)
    return EXIT_OK


def cmd_synth_data(args, cfg) -> int:
    mix = [float(v) for v in args.mix.split(",")] if args.mix else [0.2] * 5
    ds = data_mod.synth_dataset({
        "count": args.count,
        "class_mix": mix,
        "image_size": args.size,
        "seed": args.seed if args.seed is not None else cfg["train.seed"],
        "val_fraction": args.val_fraction,
    })
    out = Path(args.out)
    data_mod.save_dataset(ds, out)
    hist_train = data_mod.class_histogram(ds, "train")
    hist_val = (data_mod.class_histogram(ds, "val") if ds.val_ids
                else {c: 0 for c in CLASS_NAMES})
    rows = [(c, hist_train[c], hist_val[c]) for c in sorted(CLASS_NAMES)]
    rows.append(("total", sum(hist_train.values()), sum(hist_val.values())))
    print(_class_table("generated images per defect class", ("train", "val"),
                       rows))
    _echo_config(cfg, out)
    return EXIT_OK


def _best_tables(best_bbox: dict, best_mask: dict, map_bbox: float,
                 map_mask: float) -> tuple:
    rows_bbox = [(c, best_bbox.get(c, 0.0)) for c in sorted(CLASS_NAMES)]
    rows_bbox.append(("mAP", map_bbox))
    rows_mask = [(c, best_mask.get(c, 0.0)) for c in sorted(CLASS_NAMES)]
    rows_mask.append(("mAP", map_mask))
    text = "\n\n".join([
        _class_table("best bounding-box AP per class", ("AP",), rows_bbox),
        _class_table("best mask AP per class", ("AP",), rows_mask),
    ])
    payload = {
        "bbox": {"per_class": {str(c): best_bbox.get(c, 0.0)
                               for c in sorted(CLASS_NAMES)},
                 "map": map_bbox},
        "mask": {"per_class": {str(c): best_mask.get(c, 0.0)
                               for c in sorted(CLASS_NAMES)},
                 "map": map_mask},
    }
    return text, payload


def _load_dataset_dir(root) -> data_mod.Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataValidationError(f"dataset directory {root} not found")
    split = root / "split.json"
    return data_mod.load_dataset(
        root / "annotations.json", root / "images",
        split if split.exists() else None,
    )


def cmd_train(args, cfg) -> int:
    if args.dataset:
        cfg["data.dir"] = args.dataset
    if args.iterations is not None:
        cfg["train.iterations"] = args.iterations
    if args.eval_period is not None:
        cfg["train.eval_period"] = args.eval_period
    if args.balanced_sampling:
        cfg["sampler.balanced"] = True
    if args.out:
        cfg["out.dir"] = args.out
    if not cfg["data.dir"]:
        raise ConfigError("no dataset: set data.dir or pass --dataset")

    dataset = _load_dataset_dir(cfg["data.dir"])
    dataset.validate()
    out = Path(cfg["out.dir"])
    _echo_config(cfg, out)
    state, history = train.train_loop(dataset, cfg, out, resume=args.resume)

    text, payload = _best_tables(state.best_bbox_ap, state.best_mask_ap,
                                 state.best_map_bbox, state.best_map_mask)
    print(text)
    with open(out / "best_ap.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    return EXIT_OK


def _load_model(weights_path) -> tuple:
    path = Path(weights_path)
    if not path.is_file():
        raise DataValidationError(f"weights file {path} not found")
    state, stored_cfg = train.load_checkpoint(path)
    return state.model, stored_cfg


def cmd_evaluate(args, cfg) -> int:
    model, _ = _load_model(args.weights)
    dataset = _load_dataset_dir(args.dataset or cfg["data.dir"])
    n_boxes = args.boxes if args.boxes is not None else cfg["boxes.infer"]
    steps = args.steps if args.steps is not None else cfg["sampler.steps"]
    seed = args.seed if args.seed is not None else cfg["train.seed"]
    schedule = train.build_schedule(cfg)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    gts = eval_mod.split_annotations(dataset, "val")
    if args.oracle:
        preds = [eval_mod.PredictionRecord(
            image_id=a.image_id, class_id=a.class_id, score=1.0,
            bbox=tuple(a.bbox), mask=decode_rle(a.mask)) for a in gts]
        bbox = eval_mod.compute_map(preds, gts, "bbox", cfg["eval.confidence"])
        mask = eval_mod.compute_map(preds, gts, "mask", cfg["eval.confidence"])
        timing = None
    else:
        result = eval_mod.evaluate_split(
            model, dataset, n_boxes=n_boxes, steps=steps, seed=seed,
            schedule=schedule, confidence=cfg["eval.confidence"],
            suppress=cfg["eval.suppress"],
            suppress_iou=cfg["eval.suppress_iou"],
            mask_threshold=cfg["mask.threshold"],
        )
        bbox, mask = result["bbox"], result["mask"]
        timing = eval_mod.measure_inference_time(
            model, dataset, n_boxes, steps, seed, schedule=schedule,
            confidence=cfg["eval.confidence"], suppress=cfg["eval.suppress"],
            suppress_iou=cfg["eval.suppress_iou"],
            mask_threshold=cfg["mask.threshold"],
        )

    report = {
        "seed": seed,
        "n_boxes": n_boxes,
        "steps": steps,
        "oracle": bool(args.oracle),
        "confidence_threshold_note":
            "confidence 0.5 applied before ranking, unlike vanilla COCO",
        "bbox": bbox.to_dict(),
        "mask": mask.to_dict(),
        "config": {k: cfg[k] for k in sorted(cfg)},
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    if timing is not None:
        with open(out_path.parent / (out_path.stem + ".timing.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({
                "seconds_per_image": timing.seconds_per_image,
                "batch_count": timing.batch_count,
                "box_count": timing.box_count,
                "steps": timing.steps,
            }, fh, indent=2)

    rows = [(c, bbox.per_class_ap.get(c, 0.0), mask.per_class_ap.get(c, 0.0))
            for c in sorted({g.class_id for g in gts})]
    rows.append(("mAP", bbox.map, mask.map))
    print(_class_table("validation AP", ("bbox", "mask"), rows))
    _echo_config(cfg, out_path.parent, stem=out_path.stem)
    return EXIT_OK


def cmd_sweep_boxes(args, cfg) -> int:
    model, _ = _load_model(args.weights)
    dataset = _load_dataset_dir(args.dataset or cfg["data.dir"])
    counts = [int(v) for v in args.boxes.split(",") if v.strip()]
    steps = args.steps if args.steps is not None else cfg["sampler.steps"]
    seed = args.seed if args.seed is not None else cfg["train.seed"]
    schedule = train.build_schedule(cfg)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    rows = eval_mod.sweep_random_boxes(
        model, dataset, counts, steps, seed, schedule=schedule,
        confidence=cfg["eval.confidence"], suppress=cfg["eval.suppress"],
        suppress_iou=cfg["eval.suppress_iou"],
        mask_threshold=cfg["mask.threshold"],
    )
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_boxes", "map_bbox", "map_mask",
                         "seconds_per_image"])
        for r in rows:
            writer.writerow([r["n_boxes"], r["map_bbox"], r["map_mask"],
                             r["seconds_per_image"]])
    plot = plots.sweep_plot(rows, out_path.with_suffix(".png"))
    for r in rows:
        marker = f"  ERROR: {r['error']}" if "error" in r else ""
        print(f"boxes {r['n_boxes']:>4}: bbox mAP {r['map_bbox']:.4f}  "
              f"mask mAP {r['map_mask']:.4f}  "
              f"{r['seconds_per_image']:.4f} s/image{marker}")
    print(f"wrote {out_path} and {plot['image']}")
    _echo_config(cfg, out_path.parent, stem=out_path.stem)
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from PIL import Image, UnidentifiedImageError

    model, _ = _load_model(args.weights)
    try:
        with Image.open(args.image) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataValidationError(f"cannot read image {args.image}: {exc}") from None

    seed = args.seed if args.seed is not None else cfg["train.seed"]
    n_boxes = args.boxes if args.boxes is not None else cfg["boxes.infer"]
    steps = args.steps if args.steps is not None else cfg["sampler.steps"]
    schedule = train.build_schedule(cfg)
    preds = eval_mod.predict_image(
        model, pixels, image_id=0, n_boxes=n_boxes, steps=steps, seed=seed,
        schedule=schedule, confidence=cfg["eval.confidence"],
        suppress=cfg["eval.suppress"], suppress_iou=cfg["eval.suppress_iou"],
        mask_threshold=cfg["mask.threshold"],
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plots.overlay(pixels, preds, out_path)
    print(json.dumps([eval_mod.prediction_to_dict(p) for p in preds]))
    _echo_config(cfg, out_path.parent, stem=out_path.stem)
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    run = Path(args.run)
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.is_file():
        raise DataValidationError(f"no metrics.jsonl in {run}")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)

    with open(metrics_path, encoding="utf-8") as fh:
        history = [json.loads(line) for line in fh if line.strip()]
    if not history:
        raise DataValidationError(f"{metrics_path} is empty")

    curve = plots.training_curves(history, out / "training_curves.png")
    print(f"wrote {curve['image']}")

    best_bbox: dict = {}
    best_mask: dict = {}
    map_bbox = map_mask = 0.0
    for event in history:
        for c_str, ap in event["ap_bbox"].items():
            c = int(c_str)
            best_bbox[c] = max(best_bbox.get(c, 0.0), ap)
        for c_str, ap in event["ap_mask"].items():
            c = int(c_str)
            best_mask[c] = max(best_mask.get(c, 0.0), ap)
        map_bbox = max(map_bbox, event["map_bbox"])
        map_mask = max(map_mask, event["map_mask"])
    text, payload = _best_tables(best_bbox, best_mask, map_bbox, map_mask)
    print(text)
    with open(out / "best_ap.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)

    sweep_csv = run / "sweep.csv"
    if sweep_csv.is_file():
        with open(sweep_csv, encoding="utf-8", newline="") as fh:
            rows = [{"n_boxes": int(r["n_boxes"]),
                     "map_bbox": float(r["map_bbox"]),
                     "map_mask": float(r["map_mask"]),
                     "seconds_per_image": float(r["seconds_per_image"])}
                    for r in csv.DictReader(fh)]
        plot = plots.sweep_plot(rows, out / "sweep_plot.png")
        print(f"wrote {plot['image']}")
    _echo_config(cfg, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffinspect",
        description="Diffusion-based instance segmentation for SEM "
                    "semiconductor defect inspection.",
    )
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable)")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data",
                       help="validate and stage a dataset for training")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--to-jpg", action="store_true",
                   help="convert TIFF sources to 8-bit grayscale JPEG")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth-data", help="generate a toy SEM defect dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--mix", help="5 comma-separated class proportions")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--dataset", help="dataset directory (overrides data.dir)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--eval-period", type=int)
    p.add_argument("--balanced-sampling", action="store_true")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on validation")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset")
    p.add_argument("--boxes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true",
                   help="feed ground truth as predictions (metric self-check)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-boxes",
                       help="evaluate across random box counts")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset")
    p.add_argument("--boxes", required=True,
                   help="comma-separated counts, e.g. 500,400,300")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep_boxes)

    p = sub.add_parser("infer", help="predict one image and render an overlay")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="overlay PNG path")
    p.add_argument("--boxes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="render plots and tables from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s", stream=sys.stderr,
    )
    try:
        cfg = config_mod.load_config(args.config, args.set)
        return args.func(args, cfg)
    except (DataValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
