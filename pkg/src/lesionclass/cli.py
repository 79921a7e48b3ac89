"""Command-line front end: synth / pretrain / train / ablate / eval / gradcam.

Every command reads one YAML config (flags override file values), takes an
exclusive lock on its output directory, writes the fully-resolved config next
to its outputs, and exits 0 on success or nonzero with a single-line JSON
error on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .data import DatasetManifest, ManifestError, load_image, load_manifest, stratified_split
from .evalviz import evaluate, grad_cam, save_heatmap
from .model import CheckpointError, load_checkpoint
from .pretrain import run_pretrain, write_pretrain_log
from .retrain import ablation_suite, run_retrain
from .runtime import apply_determinism
from .synth import synth_generate


class CliError(RuntimeError):
    """User-facing failure that should exit with a clean one-line error."""


def _fail(message: str, code: int) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return code


@contextmanager
def _run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output dir {out_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest_path(cfg: RunConfig) -> Path:
    return cfg.paths.data_root / "manifest.csv"


def _load_split(cfg: RunConfig) -> tuple[DatasetManifest, DatasetManifest]:
    full = load_manifest(_manifest_path(cfg))
    return stratified_split(full, cfg.test_fraction, seed=cfg.seed)


def _precheck(command: str, cfg: RunConfig, args: argparse.Namespace) -> None:
    """Report missing inputs before any compute starts."""
    if command != "synth" and not _manifest_path(cfg).is_file():
        raise CliError(f"dataset manifest not found: {_manifest_path(cfg)} (run `synth` first)")
    if command == "train" and cfg.retrain.use_pretrained:
        if cfg.paths.pretrained is None:
            raise CliError("retrain.use_pretrained is on but paths.pretrained is not set")
        if not cfg.paths.pretrained.is_file():
            raise CliError(f"pretrained checkpoint not found: {cfg.paths.pretrained}")
    if command in ("eval", "gradcam"):
        if cfg.paths.checkpoint is None:
            raise CliError(f"`{command}` needs paths.checkpoint")
        if not cfg.paths.checkpoint.is_file():
            raise CliError(f"checkpoint not found: {cfg.paths.checkpoint}")
    if command == "gradcam" and not (getattr(args, "image", None) or cfg.gradcam_image):
        raise CliError("`gradcam` needs an image id (--image or gradcam.image_id)")


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> None:
    manifest = synth_generate(cfg.synth, cfg.paths.data_root)
    print(f"synth: wrote {len(manifest)} images across {manifest.num_classes} classes "
          f"to {cfg.paths.data_root}")


def cmd_pretrain(cfg: RunConfig, args: argparse.Namespace) -> None:
    train_m, _ = _load_split(cfg)
    ckpt_path = cfg.paths.out_dir / "pretrained.pt"
    _, metrics = run_pretrain(train_m, cfg.backbone, cfg.projector, cfg.pretrain,
                              checkpoint_path=ckpt_path)
    write_pretrain_log(metrics, cfg.paths.out_dir / "pretrain_log.csv")
    last = metrics[-1] if metrics else None
    tail = f"loss {last.mean_loss:.4f}, view-match accuracy {last.accuracy:.3f}" if last else "no epochs"
    print(f"pretrain: {len(metrics)} epochs ({tail}); checkpoint {ckpt_path}")


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    train_m, test_m = _load_split(cfg)
    pretrained = load_checkpoint(cfg.paths.pretrained) if cfg.retrain.use_pretrained else None
    model, result = run_retrain(train_m, cfg.backbone, cfg.projector, cfg.retrain,
                                pretrained=pretrained, test_manifest=test_m,
                                out_dir=cfg.paths.out_dir)
    report = evaluate(model, test_m)
    report.save(cfg.paths.out_dir / "eval_report.json")
    print(f"train: {cfg.retrain.epochs} epochs; test accuracy {report.accuracy:.3f} "
          f"(best {result.best_test_accuracy:.3f} at epoch {result.best_epoch}); "
          f"outputs in {cfg.paths.out_dir}")


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> None:
    train_m, test_m = _load_split(cfg)
    checkpoints = {}
    for seed in cfg.ablate_seeds:
        path = cfg.paths.out_dir / f"pretrained_seed{seed}.pt"
        run_pretrain(train_m, cfg.backbone, cfg.projector, replace(cfg.pretrain, seed=seed),
                     checkpoint_path=path)
        checkpoints[seed] = load_checkpoint(path)
    rows = ablation_suite(train_m, test_m, cfg.backbone, cfg.projector, cfg.retrain,
                          list(cfg.ablate_seeds), checkpoints,
                          report_path=cfg.paths.out_dir / "ablation.csv")
    print(f"ablate: seeds {list(cfg.ablate_seeds)}; report {cfg.paths.out_dir / 'ablation.csv'}")
    for row in rows:
        print(f"  {row.name:<12} mean accuracy {row.mean_accuracy:.3f} (std {row.std_accuracy:.3f})")


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    _, test_m = _load_split(cfg)
    report = evaluate(load_checkpoint(cfg.paths.checkpoint), test_m)
    out = cfg.paths.out_dir / "eval_report.json"
    report.save(out)
    print(f"eval: accuracy {report.accuracy:.3f} on {report.total} test images; report {out}")


def cmd_gradcam(cfg: RunConfig, args: argparse.Namespace) -> None:
    image_id = args.image or cfg.gradcam_image
    stage = args.stage if args.stage is not None else cfg.gradcam_stage
    full = load_manifest(_manifest_path(cfg))
    entry = next((e for e in full.entries if Path(e.path).stem == image_id), None)
    if entry is None:
        raise CliError(f"image id {image_id!r} not found in {_manifest_path(cfg)}")
    image = load_image(full, entry)
    heat = grad_cam(load_checkpoint(cfg.paths.checkpoint), image, stage=stage)
    heat_path, overlay_path = save_heatmap(heat, image, cfg.paths.out_dir, stage)
    print(f"gradcam: wrote {heat_path} and {overlay_path}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionclass",
        description="Two-stage lesion-image classification: contrastive pretraining, "
                    "attention-guided supervised training, evaluation and heatmaps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded deterministic torch kernels")
        return p

    add("synth", "generate the synthetic dataset")
    add("pretrain", "stage I: contrastive pretraining of the backbone")
    train = add("train", "stage II: supervised training with auxiliary losses")
    train.add_argument("--no-pretrained", action="store_true",
                       help="start from scratch instead of the pretrained backbone")
    train.add_argument("--no-attention", action="store_true",
                       help="drop attention-map supervision (implies --no-featcr)")
    train.add_argument("--no-featcr", action="store_true",
                       help="drop feature contrast regulation")
    train.add_argument("--no-cbfocal", action="store_true",
                       help="plain cross-entropy instead of class-balanced focal loss")
    add("ablate", "run the cumulative configurations over several seeds")
    add("eval", "evaluate a trained checkpoint on the test split")
    gradcam = add("gradcam", "write class-activation heatmaps for one image")
    gradcam.add_argument("--image", type=str, default=None, help="image id (manifest path stem)")
    gradcam.add_argument("--stage", type=int, default=None, choices=(1, 2, 3, 4),
                         help="backbone stage to visualize")
    return parser


def _apply_train_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    flags = {}
    if args.no_pretrained:
        flags["use_pretrained"] = False
    if args.no_attention:
        flags["use_mask_attention"] = False
        flags["use_feat_cr"] = False
    if args.no_featcr:
        flags["use_feat_cr"] = False
    if args.no_cbfocal:
        flags["use_cb_focal"] = False
    if flags:
        cfg.retrain = replace(cfg.retrain, **flags)
        cfg.retrain.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_override=args.seed,
                              out_override=str(args.out) if args.out is not None else None)
        if args.command == "train":
            cfg = _apply_train_flags(cfg, args)
        _precheck(args.command, cfg, args)
        apply_determinism(args.deterministic)
        with _run_lock(cfg.paths.out_dir):
            dump_run_config(cfg, cfg.paths.out_dir / "config.resolved.yaml")
            COMMANDS[args.command](cfg, args)
        return 0
    except CliError as exc:
        return _fail(str(exc), 2)
    except (ConfigError, ManifestError, CheckpointError) as exc:
        return _fail(str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - CLI boundary: no tracebacks, single-line errors
        return _fail(f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
