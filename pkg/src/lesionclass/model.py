"""Residual backbone with four stage taps, the contrastive projector, the
per-stage dual spatial-attention heads, the classifier head, and checkpoint
serialization.

The attention heads are auxiliary: the forward path to the classifier never
multiplies features by attention maps, so the heads (and their losses) can be
dropped entirely at inference time.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

CHECKPOINT_MAGIC = b"LSNCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or incompatible checkpoint files."""


@dataclass
class BackboneConfig:
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    base_channels: int = 64
    input_size: tuple[int, int] = (224, 224)
    input_channels: int = 1

    def validate(self) -> None:
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError(f"blocks_per_stage needs 4 entries >= 1, got {self.blocks_per_stage}")
        if any(s % 32 != 0 for s in self.input_size):
            raise ValueError(f"input dims must be divisible by 32, got {self.input_size}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b)

    @property
    def pooled_dim(self) -> int:
        return 8 * self.base_channels

    @property
    def stage_sizes(self) -> tuple[tuple[int, int], ...]:
        h, w = self.input_size
        return tuple((h // f, w // f) for f in (4, 8, 16, 32))


@dataclass
class ProjectorConfig:
    hidden_dim: int = 256
    out_dim: int = 128

    def validate(self) -> None:
        if self.hidden_dim < 8 or self.out_dim < 8:
            raise ValueError(f"projector dims must be >= 8, got {self}")


def _norm(channels: int) -> nn.GroupNorm:
    # Group normalization instead of batch statistics: same affine parameter
    # count, but evaluation does not depend on running estimates, which are
    # far too noisy with ~10 small batches per epoch.
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.norm2 = _norm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                _norm(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Four-stage residual encoder; returns all stage features plus the
    adaptive-average-pooled final vector."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, ch[0], 7, stride=2, padding=3, bias=False),
            _norm(ch[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = ch[0]
        for s, (out_ch, blocks) in enumerate(zip(ch, config.blocks_per_stage)):
            stride = 1 if s == 0 else 2
            layers = [ResidualBlock(in_ch, out_ch, stride)]
            layers.extend(ResidualBlock(out_ch, out_ch) for _ in range(blocks - 1))
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        expected = (self.config.input_channels, *self.config.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(x.shape[1:])} != expected {expected}")
        out = self.stem(x)
        taps = []
        for stage in self.stages:
            out = stage(out)
            taps.append(out)
        pooled = self.pool(out).flatten(1)
        return taps, pooled


class Projector(nn.Module):
    """Two-layer MLP whose output is L2-normalized to unit length."""

    def __init__(self, in_dim: int, config: ProjectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.fc1 = nn.Linear(in_dim, config.hidden_dim)
        self.fc2 = nn.Linear(config.hidden_dim, config.out_dim)

    def forward(self, pooled: Tensor) -> Tensor:
        out = self.fc2(F.relu(self.fc1(pooled)))
        return out / (out.norm(dim=-1, keepdim=True) + 1e-12)


class AttentionHead(nn.Module):
    """Spatial attention from channelwise mean+max pooling and a 7x7 conv."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 7, padding=3)

    def forward(self, features: Tensor) -> Tensor:
        pooled = torch.cat([features.mean(dim=1, keepdim=True),
                            features.max(dim=1, keepdim=True).values], dim=1)
        return torch.sigmoid(self.conv(pooled)).squeeze(1)


class LesionModel(nn.Module):
    """Backbone + projector (stage I) + attention heads and classifier (stage II)."""

    def __init__(self, backbone_config: BackboneConfig, projector_config: ProjectorConfig, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.backbone = Backbone(backbone_config)
        self.projector = Projector(backbone_config.pooled_dim, projector_config)
        # one weight-disjoint positive/negative head pair per backbone stage
        self.attn_pos = nn.ModuleList(AttentionHead() for _ in range(4))
        self.attn_neg = nn.ModuleList(AttentionHead() for _ in range(4))
        self.classifier = nn.Linear(backbone_config.pooled_dim, num_classes)

    @property
    def backbone_config(self) -> BackboneConfig:
        return self.backbone.config

    def forward_features(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        return self.backbone(x)

    def forward(self, x: Tensor) -> Tensor:
        _, pooled = self.backbone(x)
        return self.classifier(pooled)

    def embed(self, x: Tensor) -> Tensor:
        _, pooled = self.backbone(x)
        return self.projector(pooled)

    def attention_maps(self, stage_features: list[Tensor]) -> list[tuple[Tensor, Tensor]]:
        """Per-stage (map+, map-) pairs, each (B, H_s, W_s) in (0,1)."""
        return [(self.attn_pos[s](f), self.attn_neg[s](f)) for s, f in enumerate(stage_features)]


def build_model(backbone_config: BackboneConfig, projector_config: ProjectorConfig,
                num_classes: int, seed: int) -> LesionModel:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    return LesionModel(backbone_config, projector_config, num_classes)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str  # "pretrained" | "trained"
    backbone_config: BackboneConfig
    projector_config: ProjectorConfig
    num_classes: int
    seed: int
    metrics: dict
    state: dict[str, dict]
    version: int = CHECKPOINT_VERSION


_PRETRAIN_COMPONENTS = ("backbone", "projector")
_TRAINED_COMPONENTS = ("backbone", "attn_pos", "attn_neg", "classifier")


def save_checkpoint(model: LesionModel, path: str | Path, stage: str, seed: int,
                    metrics: dict | None = None) -> Path:
    """Write a versioned, checksummed checkpoint.

    "pretrained" stores the backbone plus the (discardable) projector;
    "trained" stores backbone, attention heads and classifier.
    """
    if stage not in ("pretrained", "trained"):
        raise ValueError(f"stage must be 'pretrained' or 'trained', got {stage!r}")
    components = _PRETRAIN_COMPONENTS if stage == "pretrained" else _TRAINED_COMPONENTS
    record = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "backbone_config": asdict(model.backbone_config),
        "projector_config": asdict(model.projector.config),
        "num_classes": model.num_classes,
        "seed": seed,
        "metrics": metrics or {},
        "state": {name: getattr(model, name).state_dict() for name in components},
    }
    buf = io.BytesIO()
    torch.save(record, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; corrupt or truncated files never
    partially load."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 32 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or unsupported format version")
    digest = blob[len(CHECKPOINT_MAGIC) : len(CHECKPOINT_MAGIC) + 32]
    payload = blob[len(CHECKPOINT_MAGIC) + 32 :]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    record = torch.load(io.BytesIO(payload), weights_only=True)
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {record.get('version')} != supported {CHECKPOINT_VERSION}")
    bc = record["backbone_config"]
    bc["blocks_per_stage"] = tuple(bc["blocks_per_stage"])
    bc["input_size"] = tuple(bc["input_size"])
    return Checkpoint(
        stage=record["stage"],
        backbone_config=BackboneConfig(**bc),
        projector_config=ProjectorConfig(**record["projector_config"]),
        num_classes=record["num_classes"],
        seed=record["seed"],
        metrics=record["metrics"],
        state=record["state"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> LesionModel:
    """Rebuild a model in eval mode carrying exactly the stored weights.

    Components absent from the checkpoint (e.g. heads in a "pretrained" one)
    keep their seeded fresh initialization.
    """
    model = build_model(ckpt.backbone_config, ckpt.projector_config, ckpt.num_classes, seed=ckpt.seed)
    for name, state in ckpt.state.items():
        getattr(model, name).load_state_dict(state)
    model.eval()
    return model


def init_for_retrain(pretrained: Checkpoint | None, backbone_config: BackboneConfig,
                     projector_config: ProjectorConfig, num_classes: int, seed: int) -> LesionModel:
    """Fresh seeded model for the supervised stage; when a pretrained
    checkpoint is given, its backbone weights are copied in and the projector
    is discarded (attention heads and classifier stay freshly initialized)."""
    model = build_model(backbone_config, projector_config, num_classes, seed)
    if pretrained is not None:
        if pretrained.backbone_config != backbone_config:
            raise CheckpointError(
                f"pretrained backbone config {pretrained.backbone_config} incompatible with {backbone_config}"
            )
        model.backbone.load_state_dict(pretrained.state["backbone"])
    return model
