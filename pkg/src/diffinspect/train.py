"""Balanced class sampling, the denoising training step, and the training
loop with periodic validation and best-metric bookkeeping.

Each step corrupts encoded ground-truth boxes to a random timestep with the
closed-form forward process, asks the head to denoise them, matches the
predictions to ground truth one-to-one, and descends the composite loss.
Determinism: every random draw comes from a generator keyed on
(seed, iteration) or (seed, image_id), so (seed, config, data) fully
determine the run.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from .data import CLASS_NAMES, Dataset
from .diffusion import BoxState, corrupt, make_schedule, pad_boxes
from .errors import DataValidationError, TrainingError
from .evaluate import evaluate_split
from .losses import ImageTargets, LossConfig, compute_loss, match
from .model import DetectionModel, mask_prob_map, unit_to_pixel_xyxy
from .rle import decode_rle

log = logging.getLogger(__name__)

_CKPT_RE = re.compile(r"ckpt_(\d+)\.bin$")
_FREQ_LOG_PERIOD = 1000


@dataclass(frozen=True)
class SamplerWeights:
    """Per-training-image draw weights, aligned with image_ids, summing to 1."""

    image_ids: tuple
    weights: np.ndarray

    def __post_init__(self):
        if len(self.image_ids) != len(self.weights):
            raise ValueError("ids and weights must align")
        if len(self.weights) and not (self.weights > 0).all():
            raise ValueError("weights must be positive")
        if len(self.weights) and abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.weights.sum()}, not 1")


def balanced_weights(dataset: Dataset) -> SamplerWeights:
    """Draw weights proportional to 1 / count(class of image).

    With these weights the expected per-class draw frequency is exactly
    1/n_present. An image's class is its first annotation's class; images
    carrying several annotations are used with a warning.
    """
    ids = sorted(dataset.train_ids)
    classes = []
    multi = 0
    for image_id in ids:
        anns = dataset.annotations_for(image_id)
        if not anns:
            raise DataValidationError(
                f"training image {image_id} has no annotations; "
                "balanced sampling needs a class per image"
            )
        if len(anns) > 1:
            multi += 1
        classes.append(anns[0].class_id)
    if multi:
        log.warning(
            "%d training images carry multiple annotations; using each "
            "image's first annotation class for balancing", multi,
        )
    counts: dict = {}
    for c in classes:
        counts[c] = counts.get(c, 0) + 1
    absent = sorted(set(CLASS_NAMES) - set(counts))
    if absent:
        log.warning(
            "classes %s have no training images and drop out of the "
            "frequency budget", absent,
        )
    raw = np.array([1.0 / counts[c] for c in classes], dtype=np.float64)
    return SamplerWeights(image_ids=tuple(ids), weights=raw / raw.sum())


def uniform_weights(dataset: Dataset) -> SamplerWeights:
    ids = sorted(dataset.train_ids)
    n = len(ids)
    return SamplerWeights(image_ids=tuple(ids),
                          weights=np.full(n, 1.0 / n))


@dataclass
class TrainSample:
    pixels: np.ndarray
    targets: ImageTargets
    image_id: int = -1


@dataclass
class TrainState:
    iteration: int
    model: DetectionModel
    optimizer: torch.optim.Optimizer
    seed: int
    best_bbox_ap: dict = field(default_factory=dict)
    best_mask_ap: dict = field(default_factory=dict)
    best_map_bbox: float = 0.0
    best_map_mask: float = 0.0
    loss_log: list = field(default_factory=list)


def build_model(cfg: dict) -> DetectionModel:
    return DetectionModel(
        backbone=cfg["backbone.name"],
        backbone_weights=cfg["backbone.weights"],
        channels=cfg["model.channels"],
        head_dim=cfg["model.head_dim"],
        c_mask=cfg["mask.channels"],
        mask_layers=cfg["mask.layers"],
        mask_stride=cfg["mask.stride"],
        pool_size=cfg["model.pool_size"],
        scale=cfg["signal.scale"],
    )


def build_schedule(cfg: dict):
    return make_schedule(cfg["schedule.kind"], cfg["schedule.T"],
                         cfg["schedule.beta_start"], cfg["schedule.beta_end"])


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        w_cls=cfg["loss.w_cls"], w_l1=cfg["loss.w_l1"],
        w_giou=cfg["loss.w_giou"], w_mask=cfg["loss.w_mask"],
        focal_alpha=cfg["loss.focal_alpha"],
        focal_gamma=cfg["loss.focal_gamma"],
    )


def init_state(cfg: dict) -> TrainState:
    torch.manual_seed(cfg["train.seed"])
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
    )
    return TrainState(iteration=0, model=model, optimizer=optimizer,
                      seed=cfg["train.seed"])


def targets_for_image(dataset: Dataset, image_id: int,
                      annotations=None) -> ImageTargets:
    """Materialize one image's ground truth as arrays with decoded masks."""
    rec = dataset.image(image_id)
    anns = dataset.annotations_for(image_id) if annotations is None else annotations
    return ImageTargets(
        classes=np.array([a.class_id for a in anns], dtype=np.int64),
        boxes=np.array([a.bbox for a in anns], dtype=np.float64).reshape(-1, 4),
        masks=[decode_rle(a.mask) for a in anns],
        image_size=(rec.width, rec.height),
    )


def train_step(state: TrainState, batch: list, schedule, cfg: dict) -> TrainState:
    """One optimizer update on a batch; deterministic given (seed, iteration)."""
    rng = np.random.default_rng([state.seed, state.iteration])
    model = state.model
    model.train()
    n_boxes = cfg["boxes.train"]
    lcfg = loss_config(cfg)

    images = model.images_to_tensor([s.pixels for s in batch])
    features = model.backbone_forward(images)
    fused = model.fuse_features(features)

    signals, ts = [], []
    for sample in batch:
        t = int(rng.integers(1, schedule.T + 1))
        x0, _ = pad_boxes(sample.targets.boxes, n_boxes, rng,
                          sample.targets.image_size, model.scale)
        noise = rng.standard_normal((n_boxes, 4))
        x_t = corrupt(BoxState(boxes=x0, t=0), t, noise, schedule)
        signals.append(x_t.boxes)
        ts.append(t)
    out = model.head_forward(features, np.stack(signals), np.array(ts))

    try:
        matches, probs, prob_targets = [], [], []
        fh, fw = fused.map.shape[-2:]
        for bi, sample in enumerate(batch):
            mres = match(out, sample.targets, lcfg, batch_index=bi)
            matches.append(mres)
            pair_probs, pair_targets = [], []
            for pi, gi in mres.pairs:
                # predicted box (frozen) positions the coordinate channels
                box_sig = out.box_pred[bi, pi].detach()
                unit = (box_sig.clamp(-model.scale, model.scale)
                        / model.scale + 1) / 2
                xyxy = unit_to_pixel_xyxy(
                    unit[None], sample.targets.image_size)[0]
                prob = mask_prob_map(
                    fused.map[bi], fused.stride, out.mask_kernels[bi, pi],
                    model.layer_spec, tuple(float(v) for v in xyxy),
                )
                gt_mask = torch.as_tensor(
                    sample.targets.masks[gi].astype(np.float32))
                target = F.interpolate(gt_mask[None, None], size=(fh, fw),
                                       mode="area")[0, 0]
                pair_probs.append(prob)
                pair_targets.append(target)
            probs.append(pair_probs)
            prob_targets.append(pair_targets)

        total, components = compute_loss(
            out, [s.targets for s in batch], matches, probs, prob_targets, lcfg)
    except TrainingError as exc:
        ids = [s.image_id for s in batch]
        raise TrainingError(
            f"{exc} at iteration {state.iteration} "
            f"(images {ids}, timesteps {ts})"
        ) from exc

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.iteration += 1
    state.loss_log.append({"total": float(total.detach()), **components})
    return state


def save_checkpoint(state: TrainState, path, cfg: dict) -> None:
    torch.save({
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "seed": state.seed,
        "best_bbox_ap": state.best_bbox_ap,
        "best_mask_ap": state.best_mask_ap,
        "best_map_bbox": state.best_map_bbox,
        "best_map_mask": state.best_map_mask,
        "config": cfg,
    }, path)


def load_checkpoint(path, cfg: dict | None = None) -> tuple:
    """Restore a TrainState; returns (state, stored config).

    The stored config rebuilds the model architecture; a passed cfg, when
    given, still governs loop parameters at the call site.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    stored = blob["config"]
    torch.manual_seed(stored["train.seed"])
    model = build_model(stored)
    model.load_state_dict(blob["model"])
    run_cfg = cfg if cfg is not None else stored
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=run_cfg["train.lr"],
        weight_decay=run_cfg["train.weight_decay"],
    )
    optimizer.load_state_dict(blob["optimizer"])
    state = TrainState(
        iteration=blob["iteration"], model=model, optimizer=optimizer,
        seed=blob["seed"], best_bbox_ap=dict(blob["best_bbox_ap"]),
        best_mask_ap=dict(blob["best_mask_ap"]),
        best_map_bbox=blob["best_map_bbox"],
        best_map_mask=blob["best_map_mask"],
    )
    return state, stored


def find_latest_checkpoint(out_dir) -> Path | None:
    best = None
    for p in Path(out_dir).glob("ckpt_*.bin"):
        m = _CKPT_RE.search(p.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), p)
    return best[1] if best else None


def _validation_event(state: TrainState, dataset, schedule, cfg,
                      window: int = 50) -> dict:
    result = evaluate_split(
        state.model, dataset,
        n_boxes=cfg["boxes.infer"], steps=cfg["sampler.steps"],
        seed=state.seed, schedule=schedule,
        confidence=cfg["eval.confidence"], suppress=cfg["eval.suppress"],
        suppress_iou=cfg["eval.suppress_iou"],
        mask_threshold=cfg["mask.threshold"],
    )
    bbox, mask = result["bbox"], result["mask"]
    for c, ap in bbox.per_class_ap.items():
        state.best_bbox_ap[c] = max(state.best_bbox_ap.get(c, 0.0), ap)
    for c, ap in mask.per_class_ap.items():
        state.best_mask_ap[c] = max(state.best_mask_ap.get(c, 0.0), ap)
    state.best_map_bbox = max(state.best_map_bbox, bbox.map)
    state.best_map_mask = max(state.best_map_mask, mask.map)
    recent = state.loss_log[-window:]
    mean_loss = (float(np.mean([r["total"] for r in recent]))
                 if recent else float("nan"))
    return {
        "iteration": state.iteration,
        "ap_bbox": {str(c): v for c, v in bbox.per_class_ap.items()},
        "ap_mask": {str(c): v for c, v in mask.per_class_ap.items()},
        "map_bbox": bbox.map,
        "map_mask": mask.map,
        "loss": mean_loss,
    }


def train_loop(dataset: Dataset, cfg: dict, out_dir=None,
               resume: bool = False) -> tuple:
    """Run the full training schedule; returns (state, metrics history).

    Every eval_period iterations the validation split is evaluated, best
    records are updated, one JSON line lands in metrics.jsonl, and a
    checkpoint is written, which also makes interrupted runs resumable.
    """
    if not dataset.train_ids:
        raise DataValidationError("training split is empty")
    if not dataset.val_ids:
        raise DataValidationError("validation split is empty")

    out = Path(out_dir if out_dir is not None else cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    state = None
    if resume:
        latest = find_latest_checkpoint(out)
        if latest is not None:
            state, _ = load_checkpoint(latest, cfg)
            log.info("resuming from %s at iteration %d", latest, state.iteration)
    if state is None:
        state = init_state(cfg)
        metrics_path.unlink(missing_ok=True)

    schedule = build_schedule(cfg)
    sampler = (balanced_weights(dataset) if cfg["sampler.balanced"]
               else uniform_weights(dataset))
    ids_arr = np.array(sampler.image_ids)
    iterations = cfg["train.iterations"]
    eval_period = cfg["train.eval_period"]
    batch_size = cfg["train.batch_size"]

    history: list = []
    if resume and metrics_path.exists():
        with open(metrics_path, encoding="utf-8") as fh:
            history = [json.loads(line) for line in fh if line.strip()]
        history = [h for h in history if h["iteration"] <= state.iteration]

    class_draws = np.zeros(len(CLASS_NAMES), dtype=np.int64)

    while state.iteration < iterations:
        it = state.iteration
        loop_rng = np.random.default_rng([state.seed, it, 1])
        picked = loop_rng.choice(ids_arr, size=batch_size, p=sampler.weights)
        flips = loop_rng.random(batch_size) < 0.5

        batch = []
        for image_id, flip in zip(picked.tolist(), flips.tolist()):
            rec = dataset.image(image_id)
            anns = dataset.annotations_for(image_id)
            if flip:
                rec, anns = data_mod.horizontal_flip(rec, anns)
            batch.append(TrainSample(
                pixels=rec.pixels,
                targets=targets_for_image(dataset, image_id, annotations=anns),
                image_id=image_id,
            ))
            for a in anns:
                class_draws[a.class_id] += 1

        state = train_step(state, batch, schedule, cfg)

        if state.iteration % _FREQ_LOG_PERIOD == 0 and class_draws.sum():
            freqs = class_draws / class_draws.sum()
            log.info("iteration %d sampled class frequencies: %s",
                     state.iteration,
                     ", ".join(f"{c}={f:.3f}" for c, f in enumerate(freqs)))

        due = state.iteration % eval_period == 0
        final = state.iteration == iterations
        if due or final:
            if due or not history or history[-1]["iteration"] != state.iteration:
                event = _validation_event(state, dataset, schedule, cfg)
                history.append(event)
                with open(metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event) + "\n")
                save_checkpoint(state, out / f"ckpt_{state.iteration}.bin", cfg)
                log.info("iteration %d: map_bbox %.4f map_mask %.4f",
                         state.iteration, event["map_bbox"], event["map_mask"])

    return state, history
