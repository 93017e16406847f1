"""Box and mask IoU, per-class average precision over the 0.50:0.95 IoU
grid, validation inference with iterative box denoising, pure-compute timing,
and the random-box-count sweep.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import rle as rle_mod
from .diffusion import (
    DEFAULT_T,
    BetaSchedule,
    BoxState,
    ddim_step,
    decode_boxes,
    make_schedule,
    sampling_times,
)
from .model import DetectionModel, decode_mask

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.arange(50, 100, 5) / 100.0)
DEFAULT_CONFIDENCE = 0.5
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class PredictionRecord:
    image_id: int
    class_id: int
    score: float
    bbox: tuple
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0,1]")
        if not 0 <= self.class_id <= 4:
            raise ValueError(f"class_id {self.class_id} outside 0..4")
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate bbox {self.bbox}")


@dataclass
class APResult:
    task: str
    per_class_ap: dict
    map: float
    per_iou: dict

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map": self.map,
            "per_iou": {f"{k:.2f}": v for k, v in self.per_iou.items()},
        }


@dataclass
class TimingResult:
    seconds_per_image: float
    batch_count: int
    box_count: int
    steps: int

    def __post_init__(self):
        if self.batch_count > 0 and self.seconds_per_image <= 0:
            raise ValueError("positive batch count needs positive timing")


def prediction_to_dict(pred: PredictionRecord) -> dict:
    """JSON-ready form; the mask travels as run-length counts."""
    return {
        "image_id": pred.image_id,
        "class_id": pred.class_id,
        "score": pred.score,
        "bbox": [float(v) for v in pred.bbox],
        "mask": rle_mod.encode_rle(pred.mask) if pred.mask is not None else None,
    }


def prediction_from_dict(blob: dict) -> PredictionRecord:
    mask = blob.get("mask")
    return PredictionRecord(
        image_id=int(blob["image_id"]),
        class_id=int(blob["class_id"]),
        score=float(blob["score"]),
        bbox=tuple(float(v) for v in blob["bbox"]),
        mask=rle_mod.decode_rle(mask) if mask is not None else None,
    )


def iou_box(a, b) -> float:
    """Intersection over union of two pixel (x, y, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel IoU of two binary masks; undefined (raises) when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return int(np.logical_and(a, b).sum()) / union


def _gt_mask(gt, cache: dict | None) -> np.ndarray:
    if cache is not None and id(gt) in cache:
        return cache[id(gt)]
    m = gt.mask
    m = rle_mod.decode_rle(m) if isinstance(m, dict) else np.asarray(m)
    if cache is not None:
        cache[id(gt)] = m
    return m


def _pair_iou(pred: PredictionRecord, gt, task: str, cache) -> float:
    if task == "bbox":
        return iou_box(pred.bbox, gt.bbox)
    gt_m = _gt_mask(gt, cache)
    pred_m = pred.mask
    if pred_m is None:
        pred_m = np.zeros_like(gt_m)
    try:
        return iou_mask(pred_m, gt_m)
    except ValueError:
        return 0.0  # no-match on degenerate pairs


def compute_ap(predictions, gts, class_id: int, iou_threshold: float,
               task: str = "bbox", confidence: float = DEFAULT_CONFIDENCE,
               mask_cache: dict | None = None) -> float:
    """101-point interpolated AP for one class at one IoU threshold.

    Predictions below the confidence cutoff are dropped before ranking; ties
    in score break by (image_id, insertion index) so the ranking is
    deterministic.
    """
    if task not in ("bbox", "mask"):
        raise ValueError(f"unknown task {task!r}")
    gt_c = [g for g in gts if g.class_id == class_id]
    if not gt_c:
        return 0.0
    preds = [(i, p) for i, p in enumerate(predictions)
             if p.class_id == class_id and p.score >= confidence]
    if not preds:
        return 0.0
    preds.sort(key=lambda item: (-item[1].score, item[1].image_id, item[0]))

    by_image: dict = {}
    for g in gt_c:
        by_image.setdefault(g.image_id, []).append(g)
    matched: set = set()

    tp = np.zeros(len(preds))
    fp = np.zeros(len(preds))
    for rank, (_, pred) in enumerate(preds):
        best_iou, best_gt = 0.0, None
        for g in by_image.get(pred.image_id, ()):
            if id(g) in matched:
                continue
            iou = _pair_iou(pred, g, task, mask_cache)
            if iou > best_iou:
                best_iou, best_gt = iou, g
        if best_gt is not None and best_iou >= iou_threshold:
            matched.add(id(best_gt))
            tp[rank] = 1
        else:
            fp[rank] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gt_c)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope from the right, then sample at the 101 recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return float(ap / len(RECALL_POINTS))


def compute_map(predictions, gts, task: str = "bbox",
                confidence: float = DEFAULT_CONFIDENCE) -> APResult:
    """Mean AP over the IoU grid {0.50, 0.55, ..., 0.95} and over the classes
    present in the ground truth."""
    classes = sorted({g.class_id for g in gts})
    cache: dict = {} if task == "mask" else None
    per_class: dict = {}
    per_iou_acc = {thr: [] for thr in IOU_THRESHOLDS}
    for c in classes:
        aps = []
        for thr in IOU_THRESHOLDS:
            ap = compute_ap(predictions, gts, c, thr, task=task,
                            confidence=confidence, mask_cache=cache)
            aps.append(ap)
            per_iou_acc[thr].append(ap)
        per_class[c] = float(np.mean(aps))
    per_iou = {thr: float(np.mean(v)) if v else 0.0
               for thr, v in per_iou_acc.items()}
    overall = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(task=task, per_class_ap=per_class, map=overall,
                    per_iou=per_iou)


# ---------------------------------------------------------------------------
# inference

def predict_image(model: DetectionModel, pixels: np.ndarray, image_id: int,
                  n_boxes: int, steps: int, seed: int,
                  schedule: BetaSchedule, *,
                  confidence: float = DEFAULT_CONFIDENCE,
                  suppress: bool = True, suppress_iou: float = 0.6,
                  mask_threshold: float = 0.5, eta: float = 0.0) -> list:
    """Denoise standard-normal boxes into predictions for one image."""
    rng = np.random.default_rng([seed, image_id])
    h, w = pixels.shape
    images = model.images_to_tensor([pixels])
    with torch.no_grad():
        features = model.backbone_forward(images)
        fused = model.fuse_features(features)
        state = BoxState(boxes=rng.standard_normal((n_boxes, 4)),
                         t=schedule.T)
        out = None
        for t, t_prev in sampling_times(schedule.T, steps):
            out = model.head_forward(features, state.boxes[None], t)
            x0_hat = out.box_pred[0].detach().numpy().astype(np.float64)
            if t_prev == 0:
                break
            noise = rng.standard_normal((n_boxes, 4)) if eta > 0 else None
            state = ddim_step(state, x0_hat, t, t_prev, schedule,
                              eta=eta, noise=noise)

        logits = out.class_logits[0].detach().numpy()
        scores = out.scores[0].detach().numpy()
        classes = logits.argmax(axis=1)
        boxes = decode_boxes(x0_hat, (w, h), model.scale)

        order = sorted(np.flatnonzero(scores >= confidence).tolist(),
                       key=lambda i: (-scores[i], i))
        kept: list[int] = []
        for i in order:
            if suppress and any(
                classes[j] == classes[i]
                and iou_box(boxes[i], boxes[j]) >= suppress_iou
                for j in kept
            ):
                continue
            kept.append(i)

        records = []
        for i in kept:
            mask = decode_mask(
                fused, out.mask_kernels[0, i].detach(), model.layer_spec,
                tuple(boxes[i]), (w, h), threshold=mask_threshold,
            )
            records.append(PredictionRecord(
                image_id=image_id, class_id=int(classes[i]),
                score=float(scores[i]), bbox=tuple(float(v) for v in boxes[i]),
                mask=mask,
            ))
    return records


def run_inference(model: DetectionModel, dataset, n_boxes: int, steps: int,
                  seed: int, *, schedule: BetaSchedule | None = None,
                  split: str = "val", confidence: float = DEFAULT_CONFIDENCE,
                  suppress: bool = True, suppress_iou: float = 0.6,
                  mask_threshold: float = 0.5, eta: float = 0.0) -> list:
    """Predict every image of a split; deterministic given (weights, seed)."""
    if n_boxes < 1:
        raise ValueError(f"n_boxes must be >= 1, got {n_boxes}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if schedule is None:
        schedule = make_schedule("linear", DEFAULT_T)
    was_training = model.training
    model.eval()
    try:
        records = []
        for image_id in sorted(dataset.split_ids(split)):
            rec = dataset.image(image_id)
            records.extend(predict_image(
                model, rec.pixels, image_id, n_boxes, steps, seed, schedule,
                confidence=confidence, suppress=suppress,
                suppress_iou=suppress_iou, mask_threshold=mask_threshold,
                eta=eta,
            ))
    finally:
        model.train(was_training)
    return records


def split_annotations(dataset, split: str = "val") -> list:
    ids = set(dataset.split_ids(split))
    return [a for a in dataset.annotations if a.image_id in ids]


def evaluate_split(model: DetectionModel, dataset, *, n_boxes: int,
                   steps: int, seed: int, schedule: BetaSchedule | None = None,
                   split: str = "val", confidence: float = DEFAULT_CONFIDENCE,
                   suppress: bool = True, suppress_iou: float = 0.6,
                   mask_threshold: float = 0.5) -> dict:
    """Inference plus bbox and mask mAP over one split."""
    preds = run_inference(
        model, dataset, n_boxes, steps, seed, schedule=schedule, split=split,
        confidence=confidence, suppress=suppress, suppress_iou=suppress_iou,
        mask_threshold=mask_threshold,
    )
    gts = split_annotations(dataset, split)
    return {
        "bbox": compute_map(preds, gts, "bbox", confidence),
        "mask": compute_map(preds, gts, "mask", confidence),
        "predictions": preds,
    }


def measure_inference_time(model, dataset, n_boxes: int, steps: int,
                           seed: int = 0, *,
                           schedule: BetaSchedule | None = None,
                           split: str = "val", **predict_kw) -> TimingResult:
    """Average pure compute seconds per image at batch size 1.

    The first image runs once as an untimed warm-up. ``model`` may be any
    callable taking a pixel array (used for timing-harness stubs); a real
    detection model runs the full prediction path.
    """
    ids = sorted(dataset.split_ids(split))
    if not ids:
        raise ValueError(f"split {split!r} has no images to time")
    if schedule is None:
        schedule = make_schedule("linear", DEFAULT_T)

    if isinstance(model, nn.Module):
        def compute(pixels, image_id):
            return predict_image(model, pixels, image_id, n_boxes, steps,
                                 seed, schedule, **predict_kw)
    else:
        def compute(pixels, image_id):
            return model(pixels)

    pixel_arrays = {i: dataset.image(i).pixels for i in ids}
    compute(pixel_arrays[ids[0]], ids[0])  # warm-up, excluded
    total = 0.0
    for image_id in ids:
        start = time.perf_counter()
        compute(pixel_arrays[image_id], image_id)
        total += time.perf_counter() - start
    return TimingResult(seconds_per_image=total / len(ids),
                        batch_count=len(ids), box_count=n_boxes, steps=steps)


def sweep_random_boxes(model, dataset, counts, steps: int, seed: int = 0, *,
                       schedule: BetaSchedule | None = None,
                       split: str = "val",
                       confidence: float = DEFAULT_CONFIDENCE,
                       suppress: bool = True, suppress_iou: float = 0.6,
                       mask_threshold: float = 0.5) -> list:
    """Evaluate and time the model at each box count, largest first.

    A failing count contributes a row with an ``error`` field and NaN
    metrics; the sweep continues.
    """
    counts = list(counts)
    if not counts:
        raise ValueError("counts must be nonempty")
    if any(c < 1 for c in counts):
        raise ValueError(f"every count must be >= 1, got {counts}")
    gts = split_annotations(dataset, split)
    rows = []
    for n in sorted(counts, reverse=True):
        try:
            preds = run_inference(
                model, dataset, n, steps, seed, schedule=schedule,
                split=split, confidence=confidence, suppress=suppress,
                suppress_iou=suppress_iou, mask_threshold=mask_threshold,
            )
            timing = measure_inference_time(
                model, dataset, n, steps, seed, schedule=schedule,
                split=split, confidence=confidence, suppress=suppress,
                suppress_iou=suppress_iou, mask_threshold=mask_threshold,
            )
            rows.append({
                "n_boxes": n,
                "map_bbox": compute_map(preds, gts, "bbox", confidence).map,
                "map_mask": compute_map(preds, gts, "mask", confidence).map,
                "seconds_per_image": timing.seconds_per_image,
            })
        except Exception as exc:  # keep sweeping the remaining counts
            log.warning("sweep failed at %d boxes: %s", n, exc)
            rows.append({
                "n_boxes": n, "map_bbox": float("nan"),
                "map_mask": float("nan"),
                "seconds_per_image": float("nan"), "error": str(exc),
            })
    return rows
