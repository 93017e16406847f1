"""Brute-force average-precision reference, written independently of the
package evaluator: pure Python loops, no precision-envelope shortcut, no
numpy. Used to cross-check compute_ap / compute_map on randomized fixtures.
"""


def ref_iou_box(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    x0 = max(ax, bx)
    y0 = max(ay, by)
    x1 = min(ax + aw, bx + bw)
    y1 = min(ay + ah, by + bh)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    inter = (x1 - x0) * (y1 - y0)
    return inter / (aw * ah + bw * bh - inter)


def ref_iou_mask(a, b):
    inter = 0
    union = 0
    for ra, rb in zip(a, b):
        for va, vb in zip(ra, rb):
            if va and vb:
                inter += 1
            if va or vb:
                union += 1
    if union == 0:
        return None
    return inter / union


def _pair_iou(pred, gt, task):
    if task == "bbox":
        return ref_iou_box(pred["bbox"], gt["bbox"])
    iou = ref_iou_mask(pred["mask"], gt["mask"])
    return 0.0 if iou is None else iou


def ref_ap(preds, gts, class_id, threshold, task="bbox", confidence=0.5):
    """preds/gts: dicts with image_id, class_id, bbox, score, mask."""
    gt_c = [g for g in gts if g["class_id"] == class_id]
    if not gt_c:
        return 0.0
    survivors = []
    for index, p in enumerate(preds):
        if p["class_id"] == class_id and p["score"] >= confidence:
            survivors.append((index, p))
    survivors.sort(key=lambda ip: (-ip[1]["score"], ip[1]["image_id"], ip[0]))

    taken = [False] * len(gt_c)
    points = []  # (recall, precision) after each ranked prediction
    tp = 0
    fp = 0
    for _, p in survivors:
        best = -1
        best_iou = 0.0
        for gi, g in enumerate(gt_c):
            if taken[gi] or g["image_id"] != p["image_id"]:
                continue
            iou = _pair_iou(p, g, task)
            if iou > best_iou:
                best_iou = iou
                best = gi
        if best >= 0 and best_iou >= threshold:
            taken[best] = True
            tp += 1
        else:
            fp += 1
        points.append((tp / len(gt_c), tp / (tp + fp)))

    total = 0.0
    for k in range(101):
        level = k / 100.0
        best_prec = 0.0
        for recall, precision in points:
            if recall >= level - 1e-12 and precision > best_prec:
                best_prec = precision
        total += best_prec
    return total / 101.0


def ref_map(preds, gts, task="bbox", confidence=0.5):
    classes = sorted({g["class_id"] for g in gts})
    if not classes:
        return 0.0, {}
    per_class = {}
    for c in classes:
        aps = []
        for k in range(10):
            thr = (50 + 5 * k) / 100.0
            aps.append(ref_ap(preds, gts, c, thr, task, confidence))
        per_class[c] = sum(aps) / len(aps)
    return sum(per_class.values()) / len(per_class), per_class
