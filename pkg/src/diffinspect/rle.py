"""Run-length mask codec.

Masks travel in annotation JSON as uncompressed run-length counts over
row-major pixel order: ``{"counts": [n0, n1, n2, ...], "size": [h, w]}``
where ``n0`` is the leading run of background pixels and runs alternate
background/foreground from there.
"""

from __future__ import annotations

import numpy as np

from .errors import DataValidationError


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a binary (H, W) mask into a row-major RLE dict."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataValidationError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = (mask.reshape(-1) != 0).astype(np.uint8)
    # run boundaries; a sentinel on both sides keeps the leading zero-run explicit
    padded = np.concatenate([[2], flat, [2]])
    boundaries = np.flatnonzero(padded[1:] != padded[:-1])
    counts = np.diff(boundaries).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    elif flat.size == 0:
        counts = []
    return {"counts": counts, "size": [int(h), int(w)]}


def decode_rle(rle: dict) -> np.ndarray:
    """Decode an RLE dict back into a binary uint8 (H, W) mask."""
    try:
        counts = rle["counts"]
        h, w = rle["size"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataValidationError(f"malformed RLE object: {rle!r}") from exc
    total = sum(counts)
    if total != h * w:
        raise DataValidationError(
            f"RLE counts sum to {total}, expected {h * w} for size {h}x{w}"
        )
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for run in counts:
        if run < 0:
            raise DataValidationError("RLE counts must be nonnegative")
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(h, w)


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x, y, w, h) bounding box of a nonempty binary mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataValidationError("cannot take the bounding box of an empty mask")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1)


def mask_area(rle: dict) -> int:
    """Foreground pixel count without decoding the full mask."""
    return int(sum(rle["counts"][1::2]))
