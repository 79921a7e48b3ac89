"""Stage I: self-supervised contrastive pretraining of backbone + projector."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .augment import AugmentPolicy, make_views
from .data import DatasetManifest, load_image
from .losses import ContrastiveBatch, info_nce, similarity_matrix
from .model import BackboneConfig, LesionModel, ProjectorConfig, build_model, save_checkpoint
from .runtime import derive_seed


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 16
    temperature: float = 0.2
    # Small default step size: the view-matching objective converges cleanly
    # at desk scale with gentle updates, and the resulting weights stay close
    # enough to the init to fine-tune well afterwards.  Larger rates overshoot
    # on 64x64 inputs and leave the encoder over-specialized to the pretext
    # task.
    lr: float = 0.005
    momentum: float = 0.9
    seed: int = 0
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        self.policy.validate()


@dataclass
class PretrainEpoch:
    epoch: int
    mean_loss: float
    accuracy: float


def contrastive_accuracy(similarities: Tensor | np.ndarray) -> float:
    """Fraction of anchors whose most similar other embedding is their
    positive view (instance discrimination, ties resolved to the first max)."""
    sims = torch.as_tensor(similarities).detach().cpu().numpy().astype(np.float64)
    n = sims.shape[0]
    np.fill_diagonal(sims, -np.inf)
    top = sims.argmax(axis=1)
    positive = np.arange(n) ^ 1
    return float((top == positive).mean())


def write_pretrain_log(metrics: list[PretrainEpoch], path: str | Path) -> Path:
    path = Path(path)
    lines = ["epoch,mean_loss,contrastive_accuracy"]
    lines += [f"{m.epoch},{m.mean_loss!r},{m.accuracy!r}" for m in metrics]
    path.write_text("\n".join(lines) + "\n")
    return path


def run_pretrain(
    manifest: DatasetManifest,
    backbone_config: BackboneConfig,
    projector_config: ProjectorConfig,
    config: PretrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[LesionModel, list[PretrainEpoch]]:
    """Train backbone + projector with the contrastive objective.

    Per batch, every image contributes two augmented views; the epoch log
    holds mean loss and instance-discrimination accuracy.  Fully
    deterministic for a given seed (in deterministic torch mode).
    """
    config.validate()
    if len(manifest) == 0:
        raise ValueError("pretraining needs a nonempty manifest")
    images = [load_image(manifest, e) for e in manifest.entries]

    model = build_model(backbone_config, projector_config, manifest.num_classes, seed=config.seed)
    params = list(model.backbone.parameters()) + list(model.projector.parameters())
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)

    metrics: list[PretrainEpoch] = []
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng(np.random.SeedSequence((config.seed, 1, epoch))).permutation(len(images))
        losses: list[float] = []
        accs: list[float] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            if len(chunk) < 2:
                continue  # a lone image has no in-batch negatives
            views = []
            for idx in chunk:
                va, vb = make_views(images[idx], config.policy, derive_seed(config.seed, 2, epoch, int(idx)))
                views.extend((va, vb))
            x = torch.from_numpy(np.stack(views)[:, None, :, :])
            embeddings = model.embed(x)
            batch = ContrastiveBatch(embeddings, temperature=config.temperature)
            loss = info_nce(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite contrastive loss at epoch {epoch}, batch starting at {start} "
                    f"(images {[int(i) for i in chunk]})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            accs.append(contrastive_accuracy(similarity_matrix(batch)))
        metrics.append(PretrainEpoch(epoch, float(np.mean(losses)), float(np.mean(accs))))

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(
            model,
            checkpoint_path,
            stage="pretrained",
            seed=config.seed,
            metrics={"pretrain": [[m.epoch, m.mean_loss, m.accuracy] for m in metrics]},
        )
    return model, metrics
