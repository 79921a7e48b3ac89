"""Run configuration: one strict YAML file drives every command.

The file has one section per pipeline piece.  Unknown keys are rejected with
the offending key path and line number; a run's fully-resolved config (every
default filled in) can be dumped back out in the same schema and reloaded.
The top-level seed feeds the synthesizer, the dataset split, and both
training stages, so one value pins the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .model import BackboneConfig, ProjectorConfig
from .pretrain import PretrainConfig
from .retrain import RetrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class RunPaths:
    data_root: Path = Path("data")
    out_dir: Path = Path("runs/run")
    pretrained: Path | None = None  # consumed by `train` when use_pretrained
    checkpoint: Path | None = None  # consumed by `eval` / `gradcam`


@dataclass
class RunConfig:
    seed: int = 0
    paths: RunPaths = field(default_factory=RunPaths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        base_channels=16, input_size=(64, 64)))
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    test_fraction: float = 0.2
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    gradcam_stage: int = 4
    gradcam_image: str | None = None

    def validate(self) -> None:
        self.synth.validate()
        self.backbone.validate()
        self.projector.validate()
        self.policy.validate()
        self.pretrain.validate()
        self.retrain.validate()
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"split.test_fraction must be in (0,1), got {self.test_fraction}")
        if len(self.ablate_seeds) < 2:
            raise ConfigError("ablate.seeds needs at least 2 seeds")
        if not 1 <= self.gradcam_stage <= 4:
            raise ConfigError(f"gradcam.stage must be in 1..4, got {self.gradcam_stage}")


# Allowed keys per section; None marks a scalar leaf.
_SCHEMA: dict[str, dict[str, None] | None] = {
    "seed": None,
    "paths": {"data_root": None, "out_dir": None, "pretrained": None, "checkpoint": None},
    "synth": {"class_sizes": None, "image_size": None, "noise": None,
              "lesion_radius": None, "blob_count": None, "tail_confusable": None},
    "model": {"blocks_per_stage": None, "base_channels": None, "input_size": None,
              "projector_hidden": None, "projector_out": None},
    "augment": {"crop_scale_range": None, "flip_prob": None, "jitter_strength": None,
                "blur_prob": None},
    "pretrain": {"epochs": None, "batch_size": None, "temperature": None, "lr": None,
                 "momentum": None},
    "retrain": {"epochs": None, "batch_size": None, "lr": None, "momentum": None,
                "lambda_guidance": None, "gamma": None, "beta": None,
                "use_pretrained": None, "use_mask_attention": None, "use_feat_cr": None,
                "use_cb_focal": None, "freeze_backbone": None, "flip_prob": None,
                "lr_decay_every": None, "lr_decay_factor": None},
    "split": {"test_fraction": None},
    "ablate": {"seeds": None},
    "gradcam": {"stage": None, "image_id": None},
}


def _key_lines(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, via the YAML node graph."""
    lines: dict[str, int] = {}

    def walk(node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                dotted = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[dotted] = key_node.start_mark.line + 1
                walk(value_node, dotted)

    root = yaml.compose(text)
    if root is not None:
        walk(root, "")
    return lines


def _reject_unknown(data: dict, lines: dict[str, int]) -> None:
    for section, value in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config key '{section}' (line {lines.get(section, '?')})")
        allowed = _SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{section}' must be a mapping "
                              f"(line {lines.get(section, '?')})")
        for key in value:
            dotted = f"{section}.{key}"
            if key not in allowed:
                raise ConfigError(f"unknown config key '{dotted}' (line {lines.get(dotted, '?')})")


def _expect(kind: str, dotted: str, value, lines: dict[str, int]):
    line = lines.get(dotted, "?")
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "int_list": lambda v: isinstance(v, list) and v and all(
            isinstance(x, int) and not isinstance(x, bool) for x in v),
        "pair": lambda v: isinstance(v, list) and len(v) == 2 and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v),
        "int_pair": lambda v: isinstance(v, list) and len(v) == 2 and all(
            isinstance(x, int) and not isinstance(x, bool) for x in v),
    }[kind]
    if not ok(value):
        raise ConfigError(f"config key '{dotted}' must be a {kind.replace('_', ' ')}, "
                          f"got {value!r} (line {line})")
    return value


def _build(data: dict, lines: dict[str, int], seed_override: int | None,
           out_override: str | None) -> RunConfig:
    _reject_unknown(data, lines)
    cfg = RunConfig()

    seed = data.get("seed", cfg.seed)
    if seed is not None and "seed" in data:
        _expect("int", "seed", seed, lines)
    if seed_override is not None:
        seed = seed_override

    def section(name: str) -> dict:
        return data.get(name) or {}

    def get(sec: dict, secname: str, key: str, kind: str, default):
        if key not in sec:
            return default
        return _expect(kind, f"{secname}.{key}", sec[key], lines)

    def get_path(sec: dict, secname: str, key: str) -> Path | None:
        value = sec.get(key)
        if value is None:
            return None
        return Path(_expect("str", f"{secname}.{key}", value, lines))

    p = section("paths")
    paths = RunPaths(
        data_root=Path(get(p, "paths", "data_root", "str", str(cfg.paths.data_root))),
        out_dir=Path(get(p, "paths", "out_dir", "str", str(cfg.paths.out_dir))),
        pretrained=get_path(p, "paths", "pretrained"),
        checkpoint=get_path(p, "paths", "checkpoint"),
    )
    if out_override is not None:
        paths.out_dir = Path(out_override)

    s = section("synth")
    synth = SynthConfig(
        class_sizes=tuple(get(s, "synth", "class_sizes", "int_list", list(cfg.synth.class_sizes))),
        image_size=get(s, "synth", "image_size", "int", cfg.synth.image_size),
        seed=seed,
        noise=get(s, "synth", "noise", "number", cfg.synth.noise),
        lesion_radius=tuple(get(s, "synth", "lesion_radius", "int_pair", list(cfg.synth.lesion_radius))),
        blob_count=tuple(get(s, "synth", "blob_count", "int_pair", list(cfg.synth.blob_count))),
        tail_confusable=get(s, "synth", "tail_confusable", "bool", cfg.synth.tail_confusable),
    )

    m = section("model")
    backbone = BackboneConfig(
        blocks_per_stage=tuple(get(m, "model", "blocks_per_stage", "int_list",
                                   list(cfg.backbone.blocks_per_stage))),
        base_channels=get(m, "model", "base_channels", "int", cfg.backbone.base_channels),
        input_size=tuple(get(m, "model", "input_size", "int_pair", list(cfg.backbone.input_size))),
    )
    projector = ProjectorConfig(
        hidden_dim=get(m, "model", "projector_hidden", "int", cfg.projector.hidden_dim),
        out_dim=get(m, "model", "projector_out", "int", cfg.projector.out_dim),
    )

    a = section("augment")
    policy = AugmentPolicy(
        crop_scale_range=tuple(get(a, "augment", "crop_scale_range", "pair",
                                   list(cfg.policy.crop_scale_range))),
        flip_prob=get(a, "augment", "flip_prob", "number", cfg.policy.flip_prob),
        jitter_strength=get(a, "augment", "jitter_strength", "number", cfg.policy.jitter_strength),
        blur_prob=get(a, "augment", "blur_prob", "number", cfg.policy.blur_prob),
        output_size=backbone.input_size,
    )

    pre = section("pretrain")
    pretrain = PretrainConfig(
        epochs=get(pre, "pretrain", "epochs", "int", cfg.pretrain.epochs),
        batch_size=get(pre, "pretrain", "batch_size", "int", cfg.pretrain.batch_size),
        temperature=get(pre, "pretrain", "temperature", "number", cfg.pretrain.temperature),
        lr=get(pre, "pretrain", "lr", "number", cfg.pretrain.lr),
        momentum=get(pre, "pretrain", "momentum", "number", cfg.pretrain.momentum),
        seed=seed,
        policy=policy,
    )

    r = section("retrain")
    retrain = RetrainConfig(
        epochs=get(r, "retrain", "epochs", "int", cfg.retrain.epochs),
        batch_size=get(r, "retrain", "batch_size", "int", cfg.retrain.batch_size),
        lr=get(r, "retrain", "lr", "number", cfg.retrain.lr),
        momentum=get(r, "retrain", "momentum", "number", cfg.retrain.momentum),
        lambda_guidance=get(r, "retrain", "lambda_guidance", "number", cfg.retrain.lambda_guidance),
        gamma=get(r, "retrain", "gamma", "number", cfg.retrain.gamma),
        beta=get(r, "retrain", "beta", "number", cfg.retrain.beta),
        seed=seed,
        use_pretrained=get(r, "retrain", "use_pretrained", "bool", cfg.retrain.use_pretrained),
        use_mask_attention=get(r, "retrain", "use_mask_attention", "bool", cfg.retrain.use_mask_attention),
        use_feat_cr=get(r, "retrain", "use_feat_cr", "bool", cfg.retrain.use_feat_cr),
        use_cb_focal=get(r, "retrain", "use_cb_focal", "bool", cfg.retrain.use_cb_focal),
        freeze_backbone=get(r, "retrain", "freeze_backbone", "bool", cfg.retrain.freeze_backbone),
        flip_prob=get(r, "retrain", "flip_prob", "number", cfg.retrain.flip_prob),
        lr_decay_every=get(r, "retrain", "lr_decay_every", "int", cfg.retrain.lr_decay_every),
        lr_decay_factor=get(r, "retrain", "lr_decay_factor", "number", cfg.retrain.lr_decay_factor),
    )

    sp = section("split")
    ab = section("ablate")
    g = section("gradcam")
    gradcam_image = g.get("image_id", cfg.gradcam_image)
    if gradcam_image is not None:
        _expect("str", "gradcam.image_id", gradcam_image, lines)
    run = RunConfig(
        seed=seed,
        paths=paths,
        synth=synth,
        backbone=backbone,
        projector=projector,
        policy=policy,
        pretrain=pretrain,
        retrain=retrain,
        test_fraction=get(sp, "split", "test_fraction", "number", cfg.test_fraction),
        ablate_seeds=tuple(get(ab, "ablate", "seeds", "int_list", list(cfg.ablate_seeds))),
        gradcam_stage=get(g, "gradcam", "stage", "int", cfg.gradcam_stage),
        gradcam_image=gradcam_image,
    )
    try:
        run.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return run


def load_run_config(path: str | Path | None = None, seed_override: int | None = None,
                    out_override: str | None = None) -> RunConfig:
    """Parse a YAML run config (or build the defaults when path is None),
    applying command-line seed/output overrides last."""
    if path is None:
        return _build({}, {}, seed_override, out_override)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping of sections, got {type(data).__name__}")
    return _build(data, lines, seed_override, out_override)


def run_config_dict(cfg: RunConfig) -> dict:
    """The fully-resolved config in the same schema the loader accepts."""
    return {
        "seed": cfg.seed,
        "paths": {
            "data_root": str(cfg.paths.data_root),
            "out_dir": str(cfg.paths.out_dir),
            "pretrained": str(cfg.paths.pretrained) if cfg.paths.pretrained else None,
            "checkpoint": str(cfg.paths.checkpoint) if cfg.paths.checkpoint else None,
        },
        "synth": {
            "class_sizes": list(cfg.synth.class_sizes),
            "image_size": cfg.synth.image_size,
            "noise": cfg.synth.noise,
            "lesion_radius": list(cfg.synth.lesion_radius),
            "blob_count": list(cfg.synth.blob_count),
            "tail_confusable": cfg.synth.tail_confusable,
        },
        "model": {
            "blocks_per_stage": list(cfg.backbone.blocks_per_stage),
            "base_channels": cfg.backbone.base_channels,
            "input_size": list(cfg.backbone.input_size),
            "projector_hidden": cfg.projector.hidden_dim,
            "projector_out": cfg.projector.out_dim,
        },
        "augment": {
            "crop_scale_range": list(cfg.policy.crop_scale_range),
            "flip_prob": cfg.policy.flip_prob,
            "jitter_strength": cfg.policy.jitter_strength,
            "blur_prob": cfg.policy.blur_prob,
        },
        "pretrain": {
            "epochs": cfg.pretrain.epochs,
            "batch_size": cfg.pretrain.batch_size,
            "temperature": cfg.pretrain.temperature,
            "lr": cfg.pretrain.lr,
            "momentum": cfg.pretrain.momentum,
        },
        "retrain": {
            "epochs": cfg.retrain.epochs,
            "batch_size": cfg.retrain.batch_size,
            "lr": cfg.retrain.lr,
            "momentum": cfg.retrain.momentum,
            "lambda_guidance": cfg.retrain.lambda_guidance,
            "gamma": cfg.retrain.gamma,
            "beta": cfg.retrain.beta,
            "use_pretrained": cfg.retrain.use_pretrained,
            "use_mask_attention": cfg.retrain.use_mask_attention,
            "use_feat_cr": cfg.retrain.use_feat_cr,
            "use_cb_focal": cfg.retrain.use_cb_focal,
            "freeze_backbone": cfg.retrain.freeze_backbone,
            "flip_prob": cfg.retrain.flip_prob,
            "lr_decay_every": cfg.retrain.lr_decay_every,
            "lr_decay_factor": cfg.retrain.lr_decay_factor,
        },
        "split": {"test_fraction": cfg.test_fraction},
        "ablate": {"seeds": list(cfg.ablate_seeds)},
        "gradcam": {"stage": cfg.gradcam_stage, "image_id": cfg.gradcam_image},
    }


def dump_run_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(run_config_dict(cfg), sort_keys=False))
    return path
