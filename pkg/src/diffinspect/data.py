"""Dataset model, annotation ingestion, conversion, augmentation and the
synthetic toy-defect generator.

Annotation files are COCO-style JSON (``images`` / ``annotations`` /
``categories`` arrays) with ``bbox`` as ``[x, y, w, h]`` floats and masks as
row-major uncompressed RLE (see :mod:`diffinspect.rle`). Split membership
comes from a separate manifest ``{"train": [...], "val": [...]}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataValidationError
from .rle import decode_rle, encode_rle, mask_area, mask_bbox

log = logging.getLogger(__name__)

# Canonical defect taxonomy: five classes with stable ids.
CLASS_NAMES = {
    0: "thin bridge",
    1: "single bridge",
    2: "multi bridge (non-horizontal)",
    3: "multi bridge (horizontal)",
    4: "line collapse",
}
NUM_CLASSES = len(CLASS_NAMES)

JPEG_QUALITY = 95


@dataclass(frozen=True)
class DefectClass:
    id: int
    name: str


DEFECT_CLASSES = tuple(DefectClass(i, n) for i, n in CLASS_NAMES.items())


@dataclass(frozen=True)
class ImageRecord:
    """One grayscale image: pixels are a (height, width) uint8 array."""

    image_id: int
    width: int
    height: int
    pixels: np.ndarray
    source_path: str = ""

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataValidationError(
                f"image {self.image_id}: nonpositive dimensions "
                f"{self.width}x{self.height}"
            )
        if self.pixels.shape != (self.height, self.width):
            raise DataValidationError(
                f"image {self.image_id}: pixel array shape {self.pixels.shape} "
                f"does not match (height, width)=({self.height}, {self.width})"
            )


@dataclass(frozen=True)
class Annotation:
    """One defect instance: pixel bbox is (x_min, y_min, w, h), mask is RLE."""

    annotation_id: int
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]
    mask: dict

    def decoded_mask(self) -> np.ndarray:
        return decode_rle(self.mask)

    def validate(self, image: ImageRecord) -> None:
        x, y, w, h = self.bbox
        if self.class_id not in CLASS_NAMES:
            raise DataValidationError(
                f"annotation {self.annotation_id}: class_id {self.class_id} "
                f"outside 0..{NUM_CLASSES - 1}"
            )
        if w <= 0 or h <= 0:
            raise DataValidationError(
                f"annotation {self.annotation_id}: degenerate bbox {self.bbox}"
            )
        if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
            raise DataValidationError(
                f"annotation {self.annotation_id}: bbox {self.bbox} extends past "
                f"image {image.image_id} bounds {image.width}x{image.height}"
            )
        if list(self.mask.get("size", [])) != [image.height, image.width]:
            raise DataValidationError(
                f"annotation {self.annotation_id}: mask size {self.mask.get('size')} "
                f"does not match image {image.height}x{image.width}"
            )
        if mask_area(self.mask) == 0:
            raise DataValidationError(
                f"annotation {self.annotation_id}: empty mask"
            )
        # every mask pixel must sit inside the bbox expanded by 1px slack
        ys, xs = np.nonzero(self.decoded_mask())
        slack = 1.0
        if (
            xs.min() < x - slack
            or ys.min() < y - slack
            or xs.max() + 1 > x + w + slack
            or ys.max() + 1 > y + h + slack
        ):
            raise DataValidationError(
                f"annotation {self.annotation_id}: mask pixels escape bbox "
                f"{self.bbox} (+1px slack)"
            )


@dataclass
class Dataset:
    """Images plus annotations plus train/validation membership.

    Treat instances as immutable after construction; they are safe to share
    across concurrent readers.
    """

    images: list[ImageRecord]
    annotations: list[Annotation]
    train_ids: frozenset[int] = field(default_factory=frozenset)
    val_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self._by_image: dict[int, list[Annotation]] = {}
        self._image_index = {im.image_id: im for im in self.images}
        for ann in self.annotations:
            self._by_image.setdefault(ann.image_id, []).append(ann)

    def image(self, image_id: int) -> ImageRecord:
        return self._image_index[image_id]

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return list(self._by_image.get(image_id, []))

    def split_ids(self, split: str) -> list[int]:
        """Image ids of one split in insertion order."""
        members = _split_set(self, split)
        return [im.image_id for im in self.images if im.image_id in members]

    def validate(self) -> None:
        """Check every structural invariant; raise listing all offenders."""
        problems: list[str] = []
        seen_images = set()
        for im in self.images:
            if im.image_id in seen_images:
                problems.append(f"duplicate image_id {im.image_id}")
            seen_images.add(im.image_id)
            try:
                im.validate()
            except DataValidationError as exc:
                problems.append(str(exc))
        seen_anns = set()
        for ann in self.annotations:
            if ann.annotation_id in seen_anns:
                problems.append(f"duplicate annotation_id {ann.annotation_id}")
            seen_anns.add(ann.annotation_id)
            if ann.image_id not in self._image_index:
                problems.append(
                    f"annotation {ann.annotation_id}: unknown image_id "
                    f"{ann.image_id}"
                )
                continue
            try:
                ann.validate(self._image_index[ann.image_id])
            except DataValidationError as exc:
                problems.append(str(exc))
        overlap = self.train_ids & self.val_ids
        if overlap:
            problems.append(f"images in both splits: {sorted(overlap)}")
        unknown_split = (self.train_ids | self.val_ids) - seen_images
        if unknown_split:
            problems.append(f"split lists unknown image ids: {sorted(unknown_split)}")
        if problems:
            raise DataValidationError("; ".join(problems))


def _split_set(dataset: Dataset, split: str) -> frozenset[int]:
    if split == "train":
        return dataset.train_ids
    if split in ("val", "validation"):
        return dataset.val_ids
    raise ValueError(f"unknown split {split!r}; expected 'train' or 'val'")


def load_dataset(
    annotation_file: str | Path,
    image_dir: str | Path,
    split_file: str | Path | None = None,
) -> Dataset:
    """Load and validate a dataset from an annotation JSON plus image files.

    Without a split manifest every image lands in the training split.
    Raises DataValidationError naming offending ids on any invariant break.
    """
    annotation_file = Path(annotation_file)
    image_dir = Path(image_dir)
    try:
        payload = json.loads(annotation_file.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(
            f"cannot read annotation file {annotation_file}: {exc}"
        ) from exc

    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise DataValidationError(
                f"{annotation_file}: missing top-level key {key!r}"
            )
    bad_cats = [
        c for c in payload["categories"] if c.get("id") not in CLASS_NAMES
    ]
    if bad_cats:
        raise DataValidationError(
            f"{annotation_file}: categories outside 0..{NUM_CLASSES - 1}: "
            f"{[c.get('id') for c in bad_cats]}"
        )

    images = []
    for entry in payload["images"]:
        path = image_dir / entry["file_name"]
        try:
            with Image.open(path) as handle:
                pixels = np.asarray(handle.convert("L"), dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise DataValidationError(f"cannot read image {path}: {exc}") from exc
        images.append(
            ImageRecord(
                image_id=int(entry["id"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                pixels=pixels,
                source_path=str(path),
            )
        )

    annotations = [
        Annotation(
            annotation_id=int(entry["id"]),
            image_id=int(entry["image_id"]),
            class_id=int(entry["category_id"]),
            bbox=tuple(float(v) for v in entry["bbox"]),
            mask=entry["segmentation"],
        )
        for entry in payload["annotations"]
    ]

    if split_file is not None:
        try:
            manifest = json.loads(Path(split_file).read_text())
            train_ids = frozenset(int(i) for i in manifest["train"])
            val_ids = frozenset(int(i) for i in manifest["val"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataValidationError(
                f"cannot read split manifest {split_file}: {exc}"
            ) from exc
    else:
        train_ids = frozenset(im.image_id for im in images)
        val_ids = frozenset()

    dataset = Dataset(images, annotations, train_ids, val_ids)
    dataset.validate()
    return dataset


@dataclass
class ConversionReport:
    """Outcome of a directory conversion: count plus per-file error records."""

    converted: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)


def convert_images(src_dir: str | Path, dst_dir: str | Path) -> ConversionReport:
    """Convert every TIFF in src_dir to an 8-bit grayscale JPEG in dst_dir.

    Unreadable files are collected as error records instead of aborting the
    batch. Output ordering is deterministic (sorted by filename).
    """
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    dst_dir.mkdir(parents=True, exist_ok=True)
    report = ConversionReport()
    candidates = sorted(
        p for p in src_dir.iterdir() if p.suffix.lower() in (".tif", ".tiff")
    )
    if not candidates:
        log.warning("no TIFF files found in %s", src_dir)
        return report
    for path in candidates:
        try:
            with Image.open(path) as handle:
                gray = handle.convert("L")
                out = dst_dir / (path.stem + ".jpg")
                gray.save(out, format="JPEG", quality=JPEG_QUALITY)
        except (OSError, ValueError) as exc:
            log.warning("failed to convert %s: %s", path, exc)
            report.errors.append((str(path), str(exc)))
            continue
        report.converted += 1
    return report


def class_histogram(dataset: Dataset, split: str) -> dict[int, int]:
    """Annotation counts per class restricted to one split (all 5 keys)."""
    members = _split_set(dataset, split)
    counts = {cid: 0 for cid in CLASS_NAMES}
    for ann in dataset.annotations:
        if ann.image_id in members:
            counts[ann.class_id] += 1
    return counts


def horizontal_flip(
    image: ImageRecord, annotations: list[Annotation]
) -> tuple[ImageRecord, list[Annotation]]:
    """Mirror an image and its annotations about the vertical axis.

    Involutive: flipping twice restores the inputs bit-exactly. Box width,
    height and mask pixel counts are preserved.
    """
    for ann in annotations:
        if ann.image_id != image.image_id:
            raise ValueError(
                f"annotation {ann.annotation_id} belongs to image "
                f"{ann.image_id}, not {image.image_id}"
            )
    flipped_img = replace(image, pixels=np.fliplr(image.pixels).copy())
    flipped_anns = []
    for ann in annotations:
        x, y, w, h = ann.bbox
        new_bbox = (image.width - (x + w), y, w, h)
        new_mask = encode_rle(np.fliplr(ann.decoded_mask()))
        flipped_anns.append(replace(ann, bbox=new_bbox, mask=new_mask))
    return flipped_img, flipped_anns


def _rounded_counts(total: int, proportions: np.ndarray) -> list[int]:
    # largest-remainder rounding so the counts sum exactly to total
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    remainder = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    for idx in order[:remainder]:
        counts[idx] += 1
    return counts.tolist()


def synth_dataset(spec: dict) -> Dataset:
    """Generate a deterministic toy dataset of line-grating defect images.

    ``spec`` keys: ``count`` (images), ``class_mix`` (5 proportions summing
    to 1), ``image_size`` (square side, >= 32), ``seed``, and optional
    ``val_fraction`` (default 0: everything in train). Each image carries one
    rendered defect whose bbox and mask are exact by construction; realized
    class counts follow largest-remainder rounding of the proportions.
    """
    count = int(spec["count"])
    mix = np.asarray(spec["class_mix"], dtype=float)
    size = int(spec["image_size"])
    seed = int(spec["seed"])
    val_fraction = float(spec.get("val_fraction", 0.0))

    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if mix.shape != (NUM_CLASSES,) or (mix < 0).any():
        raise ValueError("class_mix must be 5 nonnegative proportions")
    if abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"class_mix sums to {mix.sum()}, expected 1")
    if size < 32:
        raise ValueError(f"image_size {size} too small to render a grating (< 32)")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")

    rng = np.random.default_rng(seed)
    counts = _rounded_counts(count, mix)
    labels = np.repeat(np.arange(NUM_CLASSES), counts)
    rng.shuffle(labels)
    labels = labels.tolist()

    images, annotations = [], []
    for image_id, class_id in enumerate(labels):
        pixels, mask = _render_defect_image(class_id, size, rng)
        bbox = mask_bbox(mask)
        images.append(
            ImageRecord(
                image_id=image_id,
                width=size,
                height=size,
                pixels=pixels,
                source_path=f"synthetic/{image_id:05d}.png",
            )
        )
        annotations.append(
            Annotation(
                annotation_id=image_id,
                image_id=image_id,
                class_id=class_id,
                bbox=bbox,
                mask=encode_rle(mask),
            )
        )

    # per-class tail assignment keeps the validation split class-balanced
    val_ids: set[int] = set()
    if val_fraction > 0:
        for cid in CLASS_NAMES:
            members = [im_id for im_id, lab in enumerate(labels) if lab == cid]
            k = int(round(val_fraction * len(members)))
            val_ids.update(members[len(members) - k:])
    train_ids = frozenset(i for i in range(count) if i not in val_ids)

    dataset = Dataset(images, annotations, train_ids, frozenset(val_ids))
    dataset.validate()
    return dataset


BACKGROUND_GRAY = 40
LINE_GRAY = 200
DEFECT_GRAY = 250
NOISE_SIGMA = 5.0


def _grating(size: int, pitch: int, line_w: int) -> tuple[np.ndarray, list[int]]:
    """Vertical-line grating; returns pixels and the line left-edge columns."""
    pixels = np.full((size, size), BACKGROUND_GRAY, dtype=np.int16)
    starts = list(range(pitch // 2, size - line_w, pitch))
    for x0 in starts:
        pixels[:, x0:x0 + line_w] = LINE_GRAY
    return pixels, starts


def _band_mask(size, x0, x1, y_at_x0, y_at_x1, thickness) -> np.ndarray:
    """Pixels within a slanted band of given thickness from x0 to x1."""
    ys, xs = np.mgrid[0:size, 0:size]
    span = max(x1 - x0, 1)
    center = y_at_x0 + (y_at_x1 - y_at_x0) * (xs - x0) / span
    inside = (xs >= x0) & (xs <= x1) & (np.abs(ys - center) <= thickness / 2)
    return inside


def _render_defect_image(class_id, size, rng) -> tuple[np.ndarray, np.ndarray]:
    # coarse grating keeps every defect footprint several feature-map cells
    # wide, which is what makes the toy task learnable at small budgets
    pitch = max(size // 5, 10)
    line_w = max(pitch // 4, 3)
    gap = pitch - line_w
    pixels, starts = _grating(size, pitch, line_w)
    margin = max(size // 16, 4)
    unit = max(size // 24, 2)

    if class_id in (0, 1):
        # bridge filling the gap between two adjacent lines; class 0 stays
        # strictly thinner than class 1 at every size (gap of unit+1 px)
        i = int(rng.integers(0, len(starts) - 1))
        x0 = starts[i] + line_w
        x1 = starts[i + 1]
        if class_id == 0:
            thick = unit + int(rng.integers(0, 2))
        else:
            thick = 2 * unit + 2 + int(rng.integers(0, max(unit // 2, 1) + 1))
        y = int(rng.integers(margin, size - margin - thick))
        mask = np.zeros((size, size), dtype=bool)
        mask[y:y + thick, x0:x1] = True
    elif class_id in (2, 3):
        # band spanning several lines; class 2 is slanted, class 3 horizontal
        n_span = int(rng.integers(2, min(4, len(starts) - 1) + 1))
        i = int(rng.integers(0, len(starts) - n_span))
        x0 = starts[i] + line_w
        x1 = starts[i + n_span]
        thick = 2 * unit + int(rng.integers(0, unit + 1))
        if class_id == 2:
            drop = int(rng.integers(gap + 2, 3 * gap)) * (1 if rng.random() < 0.5 else -1)
        else:
            drop = 0
        lo = margin + abs(drop)
        y0 = int(rng.integers(lo, max(size - margin - thick - abs(drop), lo + 1)))
        mask = _band_mask(size, x0, x1 - 1, y0, y0 + drop, thick)
    else:
        # line collapse: a line segment falls sideways into the neighbouring gap
        i = int(rng.integers(0, len(starts) - 1))
        x0 = starts[i]
        seg_len = int(rng.integers(size // 3, size // 2))
        y0 = int(rng.integers(margin, size - margin - seg_len))
        pixels[y0:y0 + seg_len, x0:x0 + line_w] = BACKGROUND_GRAY
        mask = np.zeros((size, size), dtype=bool)
        mask[y0:y0 + seg_len, x0 + line_w // 2:x0 + line_w + gap * 2 // 3] = True

    pixels = np.where(mask, DEFECT_GRAY, pixels)
    noise = rng.normal(0.0, NOISE_SIGMA, (size, size))
    pixels = np.clip(pixels + noise, 0, 255).astype(np.uint8)
    return pixels, mask.astype(np.uint8)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a dataset to disk: PNG images, annotations.json, split.json.

    Returns the annotation file path. PNG keeps synthetic ground truth
    pixel-exact; real corpora converted to JPEG load the same way.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries, anns = [], []
    for im in dataset.images:
        name = f"{im.image_id:05d}.png"
        Image.fromarray(im.pixels, mode="L").save(image_dir / name)
        entries.append(
            {"id": im.image_id, "file_name": name, "width": im.width,
             "height": im.height}
        )
    for ann in dataset.annotations:
        anns.append(
            {
                "id": ann.annotation_id,
                "image_id": ann.image_id,
                "category_id": ann.class_id,
                "bbox": list(ann.bbox),
                "segmentation": ann.mask,
                "area": mask_area(ann.mask),
            }
        )
    payload = {
        "images": entries,
        "annotations": anns,
        "categories": [{"id": c.id, "name": c.name} for c in DEFECT_CLASSES],
    }
    ann_path = out_dir / "annotations.json"
    ann_path.write_text(json.dumps(payload))
    split = {
        "train": sorted(dataset.train_ids),
        "val": sorted(dataset.val_ids),
    }
    (out_dir / "split.json").write_text(json.dumps(split))
    return ann_path
