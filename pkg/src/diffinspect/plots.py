"""Static figure rendering: training curves, box-count sweep, and prediction
overlays. Every plot gets a JSON sidecar carrying the plotted series so the
figures stay machine-checkable.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402

_DPI = 120
_CLASS_COLORS = plt.get_cmap("tab10")


def _sidecar(path: Path, payload: dict) -> Path:
    side = path.with_suffix(path.suffix + ".json")
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    return side


def training_curves(history: list, out_path) -> dict:
    """AP-versus-iteration curves, one panel per task, one line per class
    plus the mAP line."""
    out_path = Path(out_path)
    iters = [h["iteration"] for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2), sharey=True)
    series: dict = {"iteration": iters}
    for ax, task, key in ((axes[0], "bbox", "ap_bbox"),
                          (axes[1], "mask", "ap_mask")):
        for c in sorted(CLASS_NAMES):
            ys = [h[key].get(str(c), 0.0) for h in history]
            series[f"{task}_ap_{c}"] = ys
            ax.plot(iters, ys, color=_CLASS_COLORS(c), alpha=0.8,
                    label=f"{c} {CLASS_NAMES[c]}")
        maps = [h[f"map_{task}"] for h in history]
        series[f"map_{task}"] = maps
        ax.plot(iters, maps, color="black", linewidth=2.2, label="mAP")
        ax.set_xlabel("iteration")
        ax.set_title(f"{task} AP on validation")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("AP")
    axes[1].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    side = _sidecar(out_path, series)
    return {"image": str(out_path), "sidecar": str(side)}


def sweep_plot(rows: list, out_path) -> dict:
    """mAP and seconds-per-image versus random box count, on twin axes."""
    out_path = Path(out_path)
    ok = [r for r in rows if "error" not in r]
    ns = [r["n_boxes"] for r in ok]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(ns, [r["map_bbox"] for r in ok], "o-", color="tab:blue",
            label="bbox mAP")
    ax.plot(ns, [r["map_mask"] for r in ok], "s-", color="tab:cyan",
            label="mask mAP")
    ax.set_xlabel("random boxes")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.02)
    ax2 = ax.twinx()
    ax2.plot(ns, [r["seconds_per_image"] for r in ok], "d--",
             color="tab:red", label="s / image")
    ax2.set_ylabel("seconds per image")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    side = _sidecar(out_path, {
        "n_boxes": ns,
        "map_bbox": [r["map_bbox"] for r in ok],
        "map_mask": [r["map_mask"] for r in ok],
        "seconds_per_image": [r["seconds_per_image"] for r in ok],
    })
    return {"image": str(out_path), "sidecar": str(side)}


def overlay(pixels: np.ndarray, predictions: list, out_path) -> dict:
    """Draw predicted boxes, class labels with scores, and mask contours."""
    out_path = Path(out_path)
    h, w = pixels.shape
    fig, ax = plt.subplots(figsize=(w / _DPI, h / _DPI), dpi=_DPI)
    ax.imshow(pixels, cmap="gray", vmin=0, vmax=255)
    for pred in predictions:
        color = _CLASS_COLORS(pred.class_id)
        x, y, bw, bh = pred.bbox
        ax.add_patch(plt.Rectangle((x, y), bw, bh, fill=False,
                                   edgecolor=color, linewidth=1.5))
        ax.text(x, max(y - 2, 0),
                f"{pred.class_id} {CLASS_NAMES[pred.class_id]} "
                f"{pred.score:.2f}",
                color=color, fontsize=6,
                bbox={"facecolor": "black", "alpha": 0.5, "pad": 1})
        if pred.mask is not None and pred.mask.any():
            ax.contour(pred.mask, levels=[0.5], colors=[color],
                       linewidths=1.0)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.subplots_adjust(left=0, right=1, top=1, bottom=0)
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    return {"image": str(out_path), "n_drawn": len(predictions)}
