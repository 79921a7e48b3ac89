"""Synthetic desk-scale dataset generator.

Renders small grayscale images with the same structure as the real data:
class 0 ("normal") is background texture only, every other class draws lesion
blobs with a class-distinct intensity pattern whose tight bounding boxes
become the LesionBox annotations.

The patterns are deliberately easy to tell apart (flat bright / flat dark /
vertical stripes / two-zone target), while every image carries an individual
background fingerprint (a faint oriented ripple plus smooth blotches) so that
view-matching pretraining has something to discriminate.  The ripple is both
an order of magnitude fainter than the stripe pattern and outside its period
(16-24 px vs 12 px), so the fingerprint never mimics a lesion texture.  `tail_confusable` swaps the last
class to a low-contrast speckled variant of the bright-blob pattern so that
the tail of an imbalanced split is genuinely hard to tell apart from the head
lesion class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, LesionBox, load_manifest

PATTERN_NAMES = ("bright", "dark", "stripes", "target")


@dataclass
class SynthConfig:
    class_sizes: tuple[int, ...] = (100, 50, 25, 12, 6)
    image_size: int = 64
    seed: int = 0
    noise: float = 0.015
    lesion_radius: tuple[int, int] = (15, 24)
    blob_count: tuple[int, int] = (1, 1)
    tail_confusable: bool = False

    def validate(self) -> None:
        if len(self.class_sizes) < 2:
            raise ValueError("need at least a normal class and one lesion class")
        if any(n <= 0 for n in self.class_sizes):
            raise ValueError(f"class sizes must be positive, got {self.class_sizes}")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        lo, hi = self.lesion_radius
        if not 3 <= lo <= hi:
            raise ValueError(f"bad lesion_radius range {self.lesion_radius}")

    @property
    def class_names(self) -> list[str]:
        names = ["normal"]
        for c in range(1, len(self.class_sizes)):
            base = PATTERN_NAMES[(c - 1) % len(PATTERN_NAMES)]
            if self.tail_confusable and c == len(self.class_sizes) - 1:
                base = "speckle"
            name = f"lesion_{base}"
            if name in names:
                name = f"{name}{c}"
            names.append(name)
        return names


def _background(size: int, label: int, rng: np.random.Generator) -> np.ndarray:
    # Weakly class-parameterized: the discriminative signal lives in the
    # blobs.  Each image gets an individual fingerprint from a faint oriented
    # ripple (orientation/period/phase) plus smooth blotches; both are far
    # weaker and far coarser than any lesion pattern.
    base = 0.35 + 0.008 * label
    blotch = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=8.0 + 0.3 * label)
    blotch *= 0.045 / max(blotch.std(), 1e-8)
    theta = rng.uniform(0.0, np.pi)
    period = rng.uniform(16.0, 24.0)
    phase = rng.uniform(0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size]
    u = xx * np.cos(theta) + yy * np.sin(theta)
    ripple = 0.035 * np.sin(2.0 * np.pi * (u / period + phase))
    return base + blotch + ripple


def _blob_geometry(size: int, radius_range: tuple[int, int], rng: np.random.Generator,
                   placed: list[np.ndarray]):
    """Sample a roundish ellipse that avoids previously placed blobs.

    Falls back to an overlapping draw after 30 rejected attempts (only
    reachable when the requested blobs cannot physically fit).
    """
    lo, hi = radius_range
    hi = min(hi, size // 2 - 4)
    lo = min(lo, hi)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(30):
        rx = int(rng.integers(lo, hi + 1))
        ry = int(rng.integers(max(lo, rx - 3), min(hi, rx + 3) + 1))
        cx = int(rng.integers(rx + 2, size - rx - 2))
        cy = int(rng.integers(ry + 2, size - ry - 2))
        d2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        support = d2 < 1.0
        if not any((support & earlier).any() for earlier in placed):
            break
    placed.append(support)
    # flat-top window: stays near full strength over most of the blob, then
    # falls off sharply, so patterns do not fade into the background
    window = np.where(support, 1.0 - np.minimum(d2, 1.0) ** 3, 0.0)
    return support, window, np.sqrt(np.maximum(d2, 0.0)), (cy, cx)


def _pattern(label: int, num_classes: int, confusable: bool, size: int, d: np.ndarray,
             center: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Class-distinct lesion intensity offset (relative to the base level).

    The returned field is blended over the background inside the blob window,
    replacing the background texture there; amplitudes are chosen so that no
    pattern saturates the [0, 1] pixel range.
    """
    pattern_id = (label - 1) % len(PATTERN_NAMES)
    is_tail = label == num_classes - 1
    contrast = float(rng.uniform(0.95, 1.0))
    ones = np.ones((size, size))
    if confusable and is_tail:
        # same smooth bright bump as the head lesion class, but weaker and
        # carrying a fine speckle texture as the only reliable cue
        weak = float(rng.uniform(0.4, 0.7))
        speckle = rng.normal(0.0, 0.16, (size, size))
        return 0.60 * weak * ones + speckle
    if pattern_id == 0:  # flat bright blob
        return 0.60 * contrast * ones
    if pattern_id == 1:
        # dark blob with fine grain: the grain is much finer than the smooth
        # background blotches and gives the interior actual texture, so
        # attention guidance has activation mass to move onto the lesion
        grain = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=1.2)
        grain *= 0.07 / max(grain.std(), 1e-8)
        return -0.30 * contrast * ones + grain
    if pattern_id == 2:
        # vertical square-wave stripes anchored to the blob center: the
        # center always sits on a stripe boundary, so even a small blob shows
        # both bright and dark bands.  The half-pixel offset keeps
        # sign(sin(.)) away from its zero at the exact center column.
        period = 12.0
        _, cx = center
        xx = np.arange(size, dtype=np.float64)[None, :] - cx - 0.5
        osc = np.sign(np.sin(2.0 * np.pi * xx / period)) * np.ones((size, 1))
        return 0.35 * contrast * osc
    # two-zone target: dark core, thick bright annulus; the core contrast
    # against the flat-bright class is maximal exactly where that class is
    # most uniform
    return contrast * np.where(d <= 0.55, -0.30, 0.60)


def _tight_box(support: np.ndarray) -> LesionBox:
    ys = np.flatnonzero(support.any(axis=1))
    xs = np.flatnonzero(support.any(axis=0))
    return LesionBox(int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1)


def render_image(config: SynthConfig, label: int, image_seed: tuple[int, ...]) -> tuple[np.ndarray, list[LesionBox]]:
    """Render one image plus its lesion boxes, deterministic in image_seed."""
    rng = np.random.default_rng(np.random.SeedSequence(image_seed))
    size = config.image_size
    base = 0.35 + 0.008 * label
    canvas = _background(size, label, rng)
    boxes: list[LesionBox] = []
    if label != 0:
        n_blobs = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
        placed: list[np.ndarray] = []
        for _ in range(n_blobs):
            support, window, d, center = _blob_geometry(size, config.lesion_radius, rng, placed)
            offset = _pattern(label, len(config.class_sizes), config.tail_confusable,
                              size, d, center, rng)
            # blend: the lesion pattern replaces the background texture inside
            # the window instead of stacking on top of it, so background
            # blotches never show through as spurious lesion texture
            canvas = canvas * (1.0 - window) + (base + offset) * window
            boxes.append(_tight_box(support))
    canvas = canvas + rng.normal(0.0, config.noise, (size, size))
    return np.clip(canvas, 0.0, 1.0), boxes


def synth_generate(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write the synthetic dataset (PNGs + manifest) and return the manifest.

    Deterministic for a given config: images are byte-identical across runs.
    """
    config.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)

    rows: list[str] = [",".join(config.class_names)]
    for label, n in enumerate(config.class_sizes):
        for i in range(n):
            pixels, boxes = render_image(config, label, (config.seed, label, i))
            rel = f"img/{label:02d}_{i:04d}.png"
            Image.fromarray(np.round(pixels * 255.0).astype(np.uint8), mode="L").save(out_dir / rel)
            row = f"{rel},{label}"
            if boxes:
                row += "," + "|".join(f"{b.x_min};{b.y_min};{b.x_max};{b.y_max}" for b in boxes)
            rows.append(row)
    manifest_path = out_dir / "manifest.csv"
    manifest_path.write_text("\n".join(rows) + "\n")
    return load_manifest(manifest_path)
