"""Dataset ingestion: labeled lesion images, box masks, manifests and splits.

Images are single-channel PNGs normalized to [0,1] on load.  A manifest is a
plain comma-separated text file: the first line holds the class names, each
following line one image record:

    relative_image_path,label_index[,x0;y0;x1;y1|x0;y0;x1;y1|...]

Boxes use half-open integer pixel coordinates [x_min, x_max) x [y_min, y_max).
Class index 0 is the "normal" class by convention and must carry no boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

NORMAL_CLASS = 0


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass(frozen=True)
class LesionBox:
    """Axis-aligned lesion bounding box, half-open pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x_min < self.x_max <= width):
            raise ValueError(f"box x-range [{self.x_min},{self.x_max}) invalid for width {width}")
        if not (0 <= self.y_min < self.y_max <= height):
            raise ValueError(f"box y-range [{self.y_min},{self.y_max}) invalid for height {height}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def hflip(self, width: int) -> "LesionBox":
        """Mirror the box across the vertical axis of an image of this width."""
        return LesionBox(width - self.x_max, self.y_min, width - self.x_min, self.y_max)

    def rescale(self, sy: float, sx: float) -> "LesionBox":
        """Rescale coordinates, rounding outward so the lesion stays covered."""
        return LesionBox(
            int(math.floor(self.x_min * sx)),
            int(math.floor(self.y_min * sy)),
            int(math.ceil(self.x_max * sx)),
            int(math.ceil(self.y_max * sy)),
        )


@dataclass
class LabeledImage:
    """A grayscale image with its class label and lesion boxes."""

    id: str
    pixels: np.ndarray  # (H, W) float in [0,1]
    label: int
    boxes: list[LesionBox] = field(default_factory=list)

    def validate(self, num_classes: int) -> None:
        if self.pixels.ndim != 2:
            raise ValueError(f"image {self.id}: pixels must be 2-D, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image {self.id}: pixel range [{lo},{hi}] outside [0,1]")
        if not 0 <= self.label < num_classes:
            raise ValueError(f"image {self.id}: label {self.label} outside 0..{num_classes - 1}")
        h, w = self.pixels.shape
        for box in self.boxes:
            box.validate(h, w)
        if self.label == NORMAL_CLASS and self.boxes:
            raise ValueError(f"image {self.id}: normal class must have no boxes")


@dataclass
class MaskPair:
    """Binary lesion mask and its complement at one spatial scale."""

    mask_pos: np.ndarray  # (H, W) uint8 in {0,1}
    mask_neg: np.ndarray
    height: int
    width: int

    def validate(self) -> None:
        for name, m in (("mask_pos", self.mask_pos), ("mask_neg", self.mask_neg)):
            if m.shape != (self.height, self.width):
                raise ValueError(f"{name} shape {m.shape} != ({self.height},{self.width})")
            vals = np.unique(m)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError(f"{name} is not binary (values {vals})")
        if not np.array_equal(self.mask_pos + self.mask_neg, np.ones_like(self.mask_pos)):
            raise ValueError("mask_pos + mask_neg != 1 elementwise")

    @property
    def lesion_fraction(self) -> float:
        return float(self.mask_pos.mean())


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to manifest root
    label: int
    boxes: tuple[LesionBox, ...] = ()


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def subset(self, indices: list[int]) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], list(self.class_names), self.root)


@dataclass
class ClassBalanceTable:
    """Per-class sample counts and the optional effective-number weights."""

    counts: np.ndarray  # (C,) int64
    beta: float | None = None
    weights: np.ndarray | None = None

    def validate(self) -> None:
        if np.any(self.counts < 0):
            raise ValueError("class counts must be >= 0")
        if self.beta is not None and not (0.0 <= self.beta < 1.0):
            raise ValueError(f"beta must be in [0,1), got {self.beta}")
        if self.weights is not None:
            if self.weights.shape != self.counts.shape:
                raise ValueError("weights and counts shape mismatch")
            present = self.counts >= 1
            if not np.all(np.isfinite(self.weights[present])):
                raise ValueError("non-finite weight for a class with samples")


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def _parse_box(token: str, line_no: int) -> LesionBox:
    parts = token.split(";")
    if len(parts) != 4:
        raise ManifestError(f"line {line_no}: box '{token}' needs 4 ';'-separated integers")
    try:
        x0, y0, x1, y1 = (int(p) for p in parts)
    except ValueError as exc:
        raise ManifestError(f"line {line_no}: box '{token}' has a non-integer field") from exc
    return LesionBox(x0, y0, x1, y1)


def _image_size(path: Path) -> tuple[int, int]:
    """Read (height, width) from the PNG header without decoding pixels."""
    with Image.open(path) as img:
        w, h = img.size
    return h, w


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and fully validate a manifest file.

    Every row is checked: the image file must exist, boxes must lie inside the
    image bounds read from the PNG header, and normal-class rows must carry no
    boxes.  Errors name the offending line.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    root = path.parent
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise ManifestError(f"{path}: missing class-name header line")
    class_names = [c.strip() for c in lines[0].split(",")]
    if any(not c for c in class_names):
        raise ManifestError(f"{path}: empty class name in header")
    num_classes = len(class_names)

    entries: list[ManifestEntry] = []
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) not in (2, 3):
            raise ManifestError(f"line {line_no}: expected 2 or 3 comma-separated fields, got {len(fields)}")
        rel_path = fields[0].strip()
        try:
            label = int(fields[1])
        except ValueError as exc:
            raise ManifestError(f"line {line_no}: label '{fields[1]}' is not an integer") from exc
        if not 0 <= label < num_classes:
            raise ManifestError(f"line {line_no}: unknown label {label} (have {num_classes} classes)")
        boxes: tuple[LesionBox, ...] = ()
        if len(fields) == 3 and fields[2].strip():
            boxes = tuple(_parse_box(tok, line_no) for tok in fields[2].split("|"))
        if label == NORMAL_CLASS and boxes:
            raise ManifestError(f"line {line_no}: normal class must have no boxes")
        img_path = root / rel_path
        if not img_path.is_file():
            raise ManifestError(f"line {line_no}: image file not found: {img_path}")
        h, w = _image_size(img_path)
        for box in boxes:
            try:
                box.validate(h, w)
            except ValueError as exc:
                raise ManifestError(f"line {line_no}: {exc}") from exc
        entries.append(ManifestEntry(rel_path, label, boxes))
    return DatasetManifest(entries, class_names, root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest in the documented text format (round-trips with load)."""
    path = Path(path)
    lines = [",".join(manifest.class_names)]
    for e in manifest.entries:
        row = f"{e.path},{e.label}"
        if e.boxes:
            row += "," + "|".join(f"{b.x_min};{b.y_min};{b.x_max};{b.y_max}" for b in e.boxes)
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_image(manifest: DatasetManifest, entry: ManifestEntry) -> LabeledImage:
    """Load one manifest entry as a LabeledImage with pixels in [0,1]."""
    img_path = manifest.image_path(entry)
    with Image.open(img_path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{img_path}: expected single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        pixels = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        pixels = arr.astype(np.float32) / 65535.0
    else:
        raise ValueError(f"{img_path}: unsupported dtype {arr.dtype}")
    image = LabeledImage(id=Path(entry.path).stem, pixels=pixels, label=entry.label, boxes=list(entry.boxes))
    return image


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def rasterize_mask(boxes: list[LesionBox] | tuple[LesionBox, ...], height: int, width: int) -> MaskPair:
    """Rasterize boxes into a binary mask pair (union; overlaps count once).

    An empty box list yields an all-zero positive mask, which is the valid
    encoding for normal-class images.
    """
    pos = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        box.validate(height, width)
        pos[box.y_min : box.y_max, box.x_min : box.x_max] = 1
    return MaskPair(mask_pos=pos, mask_neg=(1 - pos).astype(np.uint8), height=height, width=width)


def _axis_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix of fractional pixel overlaps for exact area averaging."""
    w = np.zeros((dst, src), dtype=np.float64)
    step = src / dst
    for i in range(dst):
        lo, hi = i * step, (i + 1) * step
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = overlap / step
    return w


def downsample_mask(mask: MaskPair, target_h: int, target_w: int) -> MaskPair:
    """Area-average the positive mask, binarize at 0.5 (ties round to 1).

    The complement is recomputed after binarization so the pair invariant
    stays exact.  Upsampling is not supported.
    """
    if target_h > mask.height or target_w > mask.width:
        raise ValueError(
            f"target {target_h}x{target_w} larger than source {mask.height}x{mask.width}; upsampling unsupported"
        )
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dims must be positive")
    src = mask.mask_pos.astype(np.float64)
    if mask.height % target_h == 0 and mask.width % target_w == 0:
        bh, bw = mask.height // target_h, mask.width // target_w
        avg = src.reshape(target_h, bh, target_w, bw).mean(axis=(1, 3))
    else:
        avg = _axis_weights(mask.height, target_h) @ src @ _axis_weights(mask.width, target_w).T
    pos = (avg >= 0.5).astype(np.uint8)
    return MaskPair(mask_pos=pos, mask_neg=(1 - pos).astype(np.uint8), height=target_h, width=target_w)


# ---------------------------------------------------------------------------
# Splits and counts
# ---------------------------------------------------------------------------


def stratified_split(
    manifest: DatasetManifest, test_fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split per class: round(n_c * fraction) test samples (half rounds up).

    Every class keeps at least one sample on each side; a class too small to
    satisfy that is an error.  Deterministic for a given seed.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    labels = np.array([e.label for e in manifest.entries])
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c in range(manifest.num_classes):
        idx = np.flatnonzero(labels == c)
        n_c = len(idx)
        if n_c == 0:
            continue
        n_test = int(np.floor(n_c * test_fraction + 0.5))
        if n_c >= 2:
            n_test = max(n_test, 1)
        if n_test >= n_c:
            raise ManifestError(
                f"class {c} has {n_c} sample(s); test_fraction {test_fraction} would empty the train side"
            )
        perm = rng.permutation(idx)
        test_idx.extend(int(i) for i in perm[:n_test])
        train_idx.extend(int(i) for i in perm[n_test:])
    return manifest.subset(sorted(train_idx)), manifest.subset(sorted(test_idx))


def class_counts(manifest: DatasetManifest) -> ClassBalanceTable:
    """Per-class sample counts (weights left unset)."""
    counts = np.zeros(manifest.num_classes, dtype=np.int64)
    for e in manifest.entries:
        counts[e.label] += 1
    return ClassBalanceTable(counts=counts)
