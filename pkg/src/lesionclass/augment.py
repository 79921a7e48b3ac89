"""Stochastic view generation for contrastive pretraining and the light
geometry-only augmentation used by the supervised stage.

All randomness flows from an explicit seed, so every function here is a pure
function of (inputs, seed) and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .data import LabeledImage, LesionBox


@dataclass
class AugmentPolicy:
    """View-generation knobs.

    The defaults are deliberately gentle: at desk scale the images are small
    and the view-matching task needs each image to stay individually
    recognizable, which aggressive crops/blur destroy.  With the default
    (1.0, 1.0) range the crop step is the identity and views differ only by
    flip and brightness jitter.  All four knobs can be turned up for larger
    inputs.
    """

    crop_scale_range: tuple[float, float] = (1.0, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.05
    blur_prob: float = 0.0
    output_size: tuple[int, int] = (64, 64)

    def validate(self) -> None:
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name, p in (("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be >= 0")
        if any(s < 1 for s in self.output_size):
            raise ValueError(f"output_size must be positive, got {self.output_size}")


def identity_policy(output_size: tuple[int, int]) -> AugmentPolicy:
    """Policy with every stochastic knob zeroed: make_views reduces to resize."""
    return AugmentPolicy(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                         blur_prob=0.0, output_size=output_size)


def flip_only_policy(output_size: tuple[int, int], flip_prob: float = 0.5) -> AugmentPolicy:
    """Supervised-stage default: horizontal flip plus resize, nothing else."""
    return AugmentPolicy(crop_scale_range=(1.0, 1.0), flip_prob=flip_prob, jitter_strength=0.0,
                         blur_prob=0.0, output_size=output_size)


def resize_image(pixels: np.ndarray, output_size: tuple[int, int]) -> np.ndarray:
    """Bilinear (antialiased) resize; identity when already at target size."""
    if pixels.shape == tuple(output_size):
        return pixels.astype(np.float32, copy=False)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=tuple(output_size), mode="bilinear", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def _sample_crop(shape: tuple[int, int], scale_range: tuple[float, float],
                 rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random resized-crop rectangle (y0, x0, h, w); falls back to full image."""
    height, width = shape
    lo, hi = scale_range
    if lo == hi == 1.0:
        return 0, 0, height, width
    area = height * width
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(3.0 / 4.0), math.log(4.0 / 3.0)))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if h < 1 or w < 1:
            raise ValueError(f"sampled crop {h}x{w} smaller than 1 pixel")
        if h <= height and w <= width:
            y0 = int(rng.integers(0, height - h + 1))
            x0 = int(rng.integers(0, width - w + 1))
            return y0, x0, h, w
    return 0, 0, height, width


def _augment_once(pixels: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    y0, x0, h, w = _sample_crop(pixels.shape, policy.crop_scale_range, rng)
    view = pixels[y0 : y0 + h, x0 : x0 + w]
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        view = view[:, ::-1]
    view = resize_image(view, policy.output_size)
    if policy.jitter_strength > 0:
        j = policy.jitter_strength
        brightness = rng.uniform(-j, j)
        contrast = rng.uniform(1.0 - j, 1.0 + j)
        mean = view.mean()
        view = (view - mean) * contrast + mean + brightness
    if policy.blur_prob > 0 and rng.random() < policy.blur_prob:
        sigma = rng.uniform(0.5, 1.5)
        view = gaussian_filter(view, sigma=sigma)
    return np.clip(view, 0.0, 1.0).astype(np.float32)


def make_views(image: LabeledImage, policy: AugmentPolicy, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of the same image.

    Both views have policy.output_size and values in [0,1]; deterministic for
    a given seed.
    """
    policy.validate()
    views = []
    for k in (0, 1):
        rng = np.random.default_rng(np.random.SeedSequence((seed, k)))
        views.append(_augment_once(image.pixels, policy, rng))
    return views[0], views[1]


def train_augment(image: LabeledImage, boxes: list[LesionBox], policy: AugmentPolicy,
                  seed: int) -> tuple[np.ndarray, list[LesionBox]]:
    """Geometry-trackable augmentation: horizontal flip plus resize.

    Boxes are transformed consistently with the pixels (flip mirrors x;
    resize rescales and rounds outward).
    """
    policy.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    height, width = image.pixels.shape
    view = image.pixels
    out_boxes = list(boxes)
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        view = view[:, ::-1]
        out_boxes = [b.hflip(width) for b in out_boxes]
    out_h, out_w = policy.output_size
    view = resize_image(view, policy.output_size)
    if (out_h, out_w) != (height, width):
        sy, sx = out_h / height, out_w / width
        out_boxes = [b.rescale(sy, sx) for b in out_boxes]
    return np.clip(view, 0.0, 1.0).astype(np.float32), out_boxes
