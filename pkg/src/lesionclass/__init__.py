"""Two-stage training for class-imbalanced lesion-image classification.

Stage I pretrains a small residual CNN with a contrastive view-matching
objective; stage II trains the classifier with auxiliary mask-guided
attention losses and a class-balanced focal loss.  Ships with a synthetic
dataset generator so the whole pipeline runs on a laptop CPU.
"""

from .augment import AugmentPolicy, make_views, train_augment
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .data import (
    DatasetManifest,
    LabeledImage,
    LesionBox,
    ManifestError,
    MaskPair,
    class_counts,
    downsample_mask,
    load_image,
    load_manifest,
    rasterize_mask,
    stratified_split,
    write_manifest,
)
from .evalviz import EvalReport, attention_mask_iou, evaluate, grad_cam, save_heatmap
from .losses import (
    AttentionTap,
    ContrastiveBatch,
    FocalConfig,
    attention_mask_loss,
    balanced_focal_loss,
    class_balance_weights,
    feature_contrast_loss,
    gradient_check,
    guided_attention_loss,
    info_nce,
)
from .model import (
    BackboneConfig,
    Checkpoint,
    CheckpointError,
    LesionModel,
    ProjectorConfig,
    build_model,
    init_for_retrain,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .pretrain import PretrainConfig, run_pretrain
from .retrain import RetrainConfig, ablation_suite, run_retrain
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "AttentionTap",
    "BackboneConfig",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "ContrastiveBatch",
    "DatasetManifest",
    "EvalReport",
    "FocalConfig",
    "LabeledImage",
    "LesionBox",
    "LesionModel",
    "ManifestError",
    "MaskPair",
    "PretrainConfig",
    "ProjectorConfig",
    "RetrainConfig",
    "RunConfig",
    "SynthConfig",
    "ablation_suite",
    "attention_mask_iou",
    "attention_mask_loss",
    "balanced_focal_loss",
    "build_model",
    "class_balance_weights",
    "class_counts",
    "downsample_mask",
    "dump_run_config",
    "evaluate",
    "feature_contrast_loss",
    "grad_cam",
    "gradient_check",
    "guided_attention_loss",
    "info_nce",
    "init_for_retrain",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "load_run_config",
    "make_views",
    "model_from_checkpoint",
    "rasterize_mask",
    "run_pretrain",
    "run_retrain",
    "save_checkpoint",
    "save_heatmap",
    "stratified_split",
    "synth_generate",
    "train_augment",
    "write_manifest",
]
