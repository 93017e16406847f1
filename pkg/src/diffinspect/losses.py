"""Set-prediction loss: optimal bipartite matching between predicted boxes
and ground truths, then focal classification, L1 + generalized-IoU box
regression, and a soft-overlap mask term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .errors import ConfigError, TrainingError
from .model import HeadOutput, signal_to_unit_boxes

_DICE_EPS = 1.0


@dataclass(frozen=True)
class LossConfig:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_mask: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        weights = (self.w_cls, self.w_l1, self.w_giou, self.w_mask)
        if any(w < 0 for w in weights):
            raise ConfigError(f"loss weights must be nonnegative, got {weights}")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one loss weight must be positive")
        if not 0 <= self.focal_alpha <= 1:
            raise ConfigError(f"focal alpha must be in [0,1], got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal gamma must be nonnegative, got {self.focal_gamma}")


@dataclass
class ImageTargets:
    """Ground truths of one image in array form.

    boxes are pixel (x, y, w, h); masks are full-resolution uint8 arrays
    aligned with ``classes`` and ``boxes``.
    """

    classes: np.ndarray
    boxes: np.ndarray
    masks: list = field(default_factory=list)
    image_size: tuple = (0, 0)

    @property
    def n(self) -> int:
        return int(self.classes.shape[0])


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple
    unmatched: tuple

    def __post_init__(self):
        preds = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError("matching must be one-to-one")


def _xywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    out = boxes.astype(np.float64).copy()
    out[:, 2] += out[:, 0]
    out[:, 3] += out[:, 1]
    return out


def _pairwise_giou(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """(N, 4) x (M, 4) -> (N, M) generalized IoU in [-1, 1]."""
    a = a_xyxy[:, None, :]
    b = b_xyxy[None, :, :]
    ix0 = np.maximum(a[..., 0], b[..., 0])
    iy0 = np.maximum(a[..., 1], b[..., 1])
    ix1 = np.minimum(a[..., 2], b[..., 2])
    iy1 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ex0 = np.minimum(a[..., 0], b[..., 0])
    ey0 = np.minimum(a[..., 1], b[..., 1])
    ex1 = np.maximum(a[..., 2], b[..., 2])
    ey1 = np.maximum(a[..., 3], b[..., 3])
    enclose = (ex1 - ex0) * (ey1 - ey0)
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    return iou - np.where(enclose > 0, (enclose - union) / np.maximum(enclose, 1e-12), 0.0)


def _normalized_cxcywh(boxes_xywh: np.ndarray, image_size) -> np.ndarray:
    w_img, h_img = float(image_size[0]), float(image_size[1])
    b = boxes_xywh.astype(np.float64)
    return np.stack([
        (b[:, 0] + b[:, 2] / 2) / w_img,
        (b[:, 1] + b[:, 3] / 2) / h_img,
        b[:, 2] / w_img,
        b[:, 3] / h_img,
    ], axis=1)


def match(predictions: HeadOutput, targets: ImageTargets,
          config: LossConfig, batch_index: int = 0) -> MatchResult:
    """Minimum-cost one-to-one assignment of predictions to ground truths.

    Cost per pair: w_cls * (1 - p_class) + w_l1 * L1(normalized boxes)
    + w_giou * (1 - GIoU). Every ground truth is matched whenever there are
    at least as many predictions.
    """
    n = predictions.class_logits.shape[1]
    m = targets.n
    if n == 0 or m == 0:
        return MatchResult(pairs=(), unmatched=tuple(range(n)))

    logits = predictions.class_logits[batch_index].detach().numpy()
    probs = expit(logits[:, targets.classes])

    unit = signal_to_unit_boxes(
        predictions.box_pred[batch_index].detach(), _head_scale(predictions)
    ).numpy()
    gt_unit = _normalized_cxcywh(targets.boxes, targets.image_size)
    l1 = np.abs(unit[:, None, :] - gt_unit[None, :, :]).sum(axis=2)

    w_img, h_img = targets.image_size
    pred_xyxy = np.stack([
        (unit[:, 0] - unit[:, 2] / 2) * w_img,
        (unit[:, 1] - unit[:, 3] / 2) * h_img,
        (unit[:, 0] + unit[:, 2] / 2) * w_img,
        (unit[:, 1] + unit[:, 3] / 2) * h_img,
    ], axis=1)
    giou = _pairwise_giou(pred_xyxy, _xywh_to_xyxy(targets.boxes))

    cost = (config.w_cls * (1.0 - probs)
            + config.w_l1 * l1
            + config.w_giou * (1.0 - giou))
    if not np.isfinite(cost).all():
        raise TrainingError("non-finite matching cost from model outputs")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    matched = {p for p, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched=tuple(i for i in range(n) if i not in matched),
    )


def _head_scale(predictions: HeadOutput) -> float:
    return getattr(predictions, "scale", 2.0)


def soft_dice(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft dice overlap in [0, 1]; exactly 1 when prob equals target."""
    p = prob.reshape(-1)
    t = target.reshape(-1)
    num = 2.0 * (p * t).sum() + _DICE_EPS
    den = (p * p).sum() + (t * t).sum() + _DICE_EPS
    return num / den


def _giou_torch(a_xyxy: torch.Tensor, b_xyxy: torch.Tensor) -> torch.Tensor:
    """Elementwise generalized IoU for aligned (M, 4) box tensors."""
    ix0 = torch.maximum(a_xyxy[:, 0], b_xyxy[:, 0])
    iy0 = torch.maximum(a_xyxy[:, 1], b_xyxy[:, 1])
    ix1 = torch.minimum(a_xyxy[:, 2], b_xyxy[:, 2])
    iy1 = torch.minimum(a_xyxy[:, 3], b_xyxy[:, 3])
    inter = (ix1 - ix0).clamp(min=0) * (iy1 - iy0).clamp(min=0)
    area_a = (a_xyxy[:, 2] - a_xyxy[:, 0]) * (a_xyxy[:, 3] - a_xyxy[:, 1])
    area_b = (b_xyxy[:, 2] - b_xyxy[:, 0]) * (b_xyxy[:, 3] - b_xyxy[:, 1])
    union = area_a + area_b - inter
    ex0 = torch.minimum(a_xyxy[:, 0], b_xyxy[:, 0])
    ey0 = torch.minimum(a_xyxy[:, 1], b_xyxy[:, 1])
    ex1 = torch.maximum(a_xyxy[:, 2], b_xyxy[:, 2])
    ey1 = torch.maximum(a_xyxy[:, 3], b_xyxy[:, 3])
    enclose = ((ex1 - ex0) * (ey1 - ey0)).clamp(min=1e-12)
    iou = inter / union.clamp(min=1e-12)
    return iou - (enclose - union) / enclose


def compute_loss(predictions: HeadOutput, targets: list, matches: list,
                 mask_probs: list, mask_targets: list,
                 config: LossConfig) -> tuple:
    """Total loss over a batch plus a per-component breakdown.

    ``targets[b]``/``matches[b]`` describe image b; ``mask_probs[b]`` holds
    one decoded probability map per matched pair (same order as
    matches[b].pairs) and ``mask_targets[b]`` the overlap targets at the same
    resolution. Returns (total tensor, {component: float}).
    """
    logits = predictions.class_logits
    dtype = logits.dtype
    b, n, k = logits.shape

    cls_target = torch.zeros(b, n, k, dtype=dtype)
    matched_pred_boxes, matched_gt_unit, matched_gt_xyxy = [], [], []
    probs_flat, target_maps_flat = [], []
    n_matched = 0

    for bi, (tgt, mres) in enumerate(zip(targets, matches)):
        if mres.pairs:
            gt_unit = _normalized_cxcywh(tgt.boxes, tgt.image_size)
            gt_xyxy = _xywh_to_xyxy(tgt.boxes)
        for pi, gi in mres.pairs:
            cls_target[bi, pi, int(tgt.classes[gi])] = 1.0
            matched_pred_boxes.append(predictions.box_pred[bi, pi])
            matched_gt_unit.append(gt_unit[gi])
            matched_gt_xyxy.append(gt_xyxy[gi])
            n_matched += 1
        if mask_probs and mask_probs[bi] is not None:
            if len(mask_probs[bi]) != len(mres.pairs):
                raise ValueError(
                    f"image {bi}: {len(mask_probs[bi])} mask probability "
                    f"maps for {len(mres.pairs)} matched pairs; pass None "
                    "to skip mask supervision"
                )
            for slot in range(len(mres.pairs)):
                probs_flat.append(mask_probs[bi][slot])
                target_maps_flat.append(mask_targets[bi][slot])

    norm = max(n_matched, 1)

    # focal classification over every prediction slot
    prob = torch.sigmoid(logits)
    ce = -(cls_target * torch.log(prob.clamp(min=1e-12))
           + (1 - cls_target) * torch.log((1 - prob).clamp(min=1e-12)))
    p_t = cls_target * prob + (1 - cls_target) * (1 - prob)
    alpha_t = (cls_target * config.focal_alpha
               + (1 - cls_target) * (1 - config.focal_alpha))
    focal = (alpha_t * (1 - p_t).pow(config.focal_gamma) * ce).sum() / norm

    if n_matched:
        pred_sig = torch.stack(matched_pred_boxes)
        pred_unit = signal_to_unit_boxes(pred_sig, _head_scale(predictions))
        gt_unit_t = torch.as_tensor(np.stack(matched_gt_unit), dtype=dtype)
        l1 = (pred_unit - gt_unit_t).abs().sum(dim=1).mean()

        sizes = torch.as_tensor(np.array(
            [[targets[bi].image_size[0], targets[bi].image_size[1]]
             for bi, mres in enumerate(matches) for _ in mres.pairs],
            dtype=np.float64), dtype=dtype)
        cx = pred_unit[:, 0] * sizes[:, 0]
        cy = pred_unit[:, 1] * sizes[:, 1]
        w = pred_unit[:, 2] * sizes[:, 0]
        h = pred_unit[:, 3] * sizes[:, 1]
        pred_xyxy = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
        gt_xyxy_t = torch.as_tensor(np.stack(matched_gt_xyxy), dtype=dtype)
        giou_loss = (1.0 - _giou_torch(pred_xyxy, gt_xyxy_t)).mean()
    else:
        l1 = torch.zeros((), dtype=dtype)
        giou_loss = torch.zeros((), dtype=dtype)

    if probs_flat:
        dice = torch.stack([
            1.0 - soft_dice(p, torch.as_tensor(np.asarray(t), dtype=p.dtype))
            for p, t in zip(probs_flat, target_maps_flat)
        ]).mean()
    else:
        dice = torch.zeros((), dtype=dtype)

    components = {"cls": focal, "l1": l1, "giou": giou_loss, "mask": dice}
    total = (config.w_cls * focal + config.w_l1 * l1
             + config.w_giou * giou_loss + config.w_mask * dice)
    out = {}
    for name, value in components.items():
        v = float(value.detach())
        if not np.isfinite(v):
            raise TrainingError(f"loss component {name!r} is non-finite ({v})")
        out[name] = v
    return total, out
