"""Evaluation metrics, Grad-CAM heatmaps, and attention/mask agreement."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .augment import resize_image
from .data import DatasetManifest, LabeledImage, load_image, rasterize_mask, downsample_mask
from .model import Checkpoint, LesionModel, model_from_checkpoint


@dataclass
class EvalReport:
    accuracy: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    confusion: np.ndarray  # (C, C), rows = true class
    total: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.tolist(),
            "total": self.total,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def _as_model(model: LesionModel | Checkpoint) -> LesionModel:
    if isinstance(model, Checkpoint):
        if model.stage != "trained":
            warnings.warn(f"checkpoint stage is {model.stage!r}, not 'trained'; results reflect untrained heads")
        return model_from_checkpoint(model)
    return model


def build_report(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> EvalReport:
    """Aggregate per-image predictions into accuracy / precision / recall /
    confusion counts (rows index the true class)."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, predictions):
        confusion[t, p] += 1
    total = int(confusion.sum())
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros_like(tp), where=true_totals > 0)
    accuracy = float(tp.sum() / total) if total else 0.0
    return EvalReport(accuracy, precision.tolist(), recall.tolist(), confusion, total)


def predict(model: LesionModel, manifest: DatasetManifest, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Argmax-of-logits predictions for every manifest entry, in order."""
    input_size = model.backbone_config.input_size
    was_training = model.training
    model.eval()
    labels, preds = [], []
    with torch.no_grad():
        batch: list[np.ndarray] = []
        for entry in manifest.entries:
            image = load_image(manifest, entry)
            batch.append(resize_image(image.pixels, input_size))
            labels.append(entry.label)
            if len(batch) == batch_size:
                logits = model(torch.from_numpy(np.stack(batch)[:, None]))
                preds.extend(int(i) for i in logits.argmax(dim=1))
                batch = []
        if batch:
            logits = model(torch.from_numpy(np.stack(batch)[:, None]))
            preds.extend(int(i) for i in logits.argmax(dim=1))
    if was_training:
        model.train()
    return np.array(labels), np.array(preds)


def evaluate(model: LesionModel | Checkpoint, manifest: DatasetManifest) -> EvalReport:
    """Deterministic full-manifest evaluation."""
    if len(manifest) == 0:
        raise ValueError("evaluation needs a nonempty manifest")
    net = _as_model(model)
    labels, preds = predict(net, manifest)
    return build_report(labels, preds, manifest.num_classes)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def grad_cam(model: LesionModel | Checkpoint, image: LabeledImage, stage: int = 4) -> np.ndarray:
    """Class-activation heatmap for the predicted class at one backbone stage.

    Stage-feature gradients of the winning logit are channel-averaged into
    weights, the weighted feature sum is rectified, bilinearly upsampled to
    the input size, and min-max normalized to [0,1] (an all-constant map
    becomes all zeros).
    """
    if not 1 <= stage <= 4:
        raise ValueError(f"stage must be in 1..4, got {stage}")
    net = _as_model(model)
    was_training = net.training
    net.eval()
    x = torch.from_numpy(resize_image(image.pixels, net.backbone_config.input_size)[None, None])
    with torch.enable_grad():
        stages, pooled = net.forward_features(x)
        logits = net.classifier(pooled)
        target = logits[0].argmax()
        grad = torch.autograd.grad(logits[0, target], stages[stage - 1])[0]
    feats = stages[stage - 1].detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * feats).sum(dim=1, keepdim=True))
    cam = torch.nn.functional.interpolate(cam, size=net.backbone_config.input_size,
                                          mode="bilinear", align_corners=False)[0, 0]
    cam = cam.numpy()
    if was_training:
        net.train()
    span = cam.max() - cam.min()
    if span <= 0:
        return np.zeros_like(cam, dtype=np.float32)
    return ((cam - cam.min()) / span).astype(np.float32)


def save_heatmap(heatmap: np.ndarray, image: LabeledImage, out_dir: str | Path,
                 stage: int) -> tuple[Path, Path]:
    """Write the heatmap as 8-bit grayscale plus a 50%-opacity overlay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat_path = out_dir / f"{image.id}_stage{stage}.png"
    Image.fromarray(np.round(heatmap * 255.0).astype(np.uint8), mode="L").save(heat_path)

    gray = resize_image(image.pixels, heatmap.shape)
    # simple blue->red ramp for the heat channel
    heat_rgb = np.stack([heatmap, 0.2 * heatmap, 1.0 - heatmap], axis=-1)
    gray_rgb = np.repeat(gray[:, :, None], 3, axis=2)
    overlay = np.clip(0.5 * gray_rgb + 0.5 * heat_rgb, 0.0, 1.0)
    overlay_path = out_dir / f"{image.id}_stage{stage}_overlay.png"
    Image.fromarray(np.round(overlay * 255.0).astype(np.uint8), mode="RGB").save(overlay_path)
    return heat_path, overlay_path


def heatmap_box_density(heatmap: np.ndarray, image: LabeledImage) -> tuple[float, float]:
    """Mean heatmap mass per pixel inside vs outside the lesion boxes."""
    mask = rasterize_mask(image.boxes, *heatmap.shape).mask_pos.astype(bool)
    if not mask.any() or mask.all():
        raise ValueError("density split needs boxes covering part of the image")
    return float(heatmap[mask].mean()), float(heatmap[~mask].mean())


# ---------------------------------------------------------------------------
# Attention / mask agreement
# ---------------------------------------------------------------------------


def attention_mask_iou(model: LesionModel | Checkpoint, manifest: DatasetManifest,
                       threshold: float = 0.5) -> list[float]:
    """Per-stage mean IoU between the binarized positive attention map and the
    scale-matched lesion mask, over lesion images.

    Images whose mask is empty at a given scale carry no lesion signal there
    and are skipped for that stage; a stage with no usable images reports NaN.
    """
    if isinstance(model, Checkpoint):
        if "attn_pos" not in model.state:
            raise ValueError("checkpoint has no attention-head weights")
        if model.metrics.get("flags", {}).get("use_mask_attention") is False:
            raise ValueError("checkpoint was trained without attention supervision")
        net = model_from_checkpoint(model)
    else:
        net = model
    was_training = net.training
    net.eval()
    input_size = net.backbone_config.input_size
    sums = np.zeros(4)
    counts = np.zeros(4, dtype=np.int64)
    with torch.no_grad():
        for entry in manifest.entries:
            if not entry.boxes:
                continue
            image = load_image(manifest, entry)
            pixels = resize_image(image.pixels, input_size)
            h, w = image.pixels.shape
            boxes = entry.boxes
            if (h, w) != tuple(input_size):
                sy, sx = input_size[0] / h, input_size[1] / w
                boxes = tuple(b.rescale(sy, sx) for b in boxes)
            full_mask = rasterize_mask(boxes, *input_size)
            stages, _ = net.forward_features(torch.from_numpy(pixels[None, None]))
            maps = net.attention_maps(stages)
            for s, (map_pos, _) in enumerate(maps):
                scale_h, scale_w = map_pos.shape[1:]
                mask = downsample_mask(full_mask, scale_h, scale_w).mask_pos.astype(bool)
                if not mask.any():
                    continue
                pred = map_pos[0].numpy() > threshold
                union = np.logical_or(pred, mask).sum()
                inter = np.logical_and(pred, mask).sum()
                sums[s] += inter / union
                counts[s] += 1
    if was_training:
        net.train()
    return [float(sums[s] / counts[s]) if counts[s] else float("nan") for s in range(4)]
