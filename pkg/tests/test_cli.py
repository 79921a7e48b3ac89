import json

import pytest
import yaml

from lesionclass.cli import main
from lesionclass.model import load_checkpoint


@pytest.fixture()
def workdir(tmp_path):
    """A config pointing every path into tmp_path, sized for fast runs."""
    cfg = {
        "seed": 0,
        "paths": {
            "data_root": str(tmp_path / "data"),
            "out_dir": str(tmp_path / "out"),
            "pretrained": str(tmp_path / "pre" / "pretrained.pt"),
            "checkpoint": str(tmp_path / "train" / "trained_final.pt"),
        },
        "synth": {"class_sizes": [8, 6, 5, 4]},
        "pretrain": {"epochs": 1},
        "retrain": {"epochs": 2},
        "split": {"test_fraction": 0.25},
        "ablate": {"seeds": [0, 1]},
        "gradcam": {"stage": 2},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return tmp_path, path


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])["error"]


# ---------------------------------------------------------------------------
# Per-command behavior
# ---------------------------------------------------------------------------


def test_synth_writes_dataset_and_resolved_config(workdir, capsys):
    tmp, cfg_path = workdir
    code, out, err = run(["synth", "--config", str(cfg_path)], capsys)
    assert code == 0 and err == ""
    assert "23 images across 4 classes" in out
    assert (tmp / "data" / "manifest.csv").is_file()
    assert len(list((tmp / "data" / "img").glob("*.png"))) == 23
    resolved = yaml.safe_load((tmp / "out" / "config.resolved.yaml").read_text())
    assert resolved["synth"]["class_sizes"] == [8, 6, 5, 4]
    assert not (tmp / "out" / ".lock").exists()  # released after the run


def test_synth_is_byte_deterministic(workdir, capsys):
    tmp, cfg_path = workdir
    assert run(["synth", "--config", str(cfg_path)], capsys)[0] == 0
    first = {p.name: p.read_bytes() for p in (tmp / "data" / "img").iterdir()}
    manifest = (tmp / "data" / "manifest.csv").read_bytes()
    assert run(["synth", "--config", str(cfg_path)], capsys)[0] == 0
    assert (tmp / "data" / "manifest.csv").read_bytes() == manifest
    assert {p.name: p.read_bytes() for p in (tmp / "data" / "img").iterdir()} == first


def test_precheck_missing_manifest(workdir, capsys):
    _, cfg_path = workdir
    code, _, err = run(["pretrain", "--config", str(cfg_path)], capsys)
    assert code == 2
    assert "manifest not found" in last_error(err)
    assert "synth" in last_error(err)  # tells the user what to run first


def test_unknown_config_key_is_exit_2(workdir, capsys):
    tmp, _ = workdir
    bad = tmp / "bad.yaml"
    bad.write_text("retrain:\n  warmup: 3\n")
    code, _, err = run(["synth", "--config", str(bad)], capsys)
    assert code == 2
    assert "retrain.warmup" in last_error(err)


def test_lock_contention(workdir, capsys):
    tmp, cfg_path = workdir
    (tmp / "out").mkdir()
    stale = tmp / "out" / ".lock"
    stale.write_text("12345\n")
    code, _, err = run(["synth", "--config", str(cfg_path)], capsys)
    assert code == 2
    assert "locked" in last_error(err)
    assert stale.is_file()  # a foreign lock is never cleaned up for the owner
    stale.unlink()
    assert run(["synth", "--config", str(cfg_path)], capsys)[0] == 0


def test_seed_and_out_overrides_reach_resolved_config(workdir, capsys):
    tmp, cfg_path = workdir
    other = tmp / "other_out"
    code, _, _ = run(["synth", "--config", str(cfg_path), "--seed", "7",
                      "--out", str(other)], capsys)
    assert code == 0
    resolved = yaml.safe_load((other / "config.resolved.yaml").read_text())
    assert resolved["seed"] == 7
    assert resolved["paths"]["out_dir"] == str(other)


def test_train_requires_pretrained_path(workdir, capsys):
    tmp, cfg_path = workdir
    run(["synth", "--config", str(cfg_path)], capsys)
    code, _, err = run(["train", "--config", str(cfg_path),
                        "--out", str(tmp / "train")], capsys)
    assert code == 2
    assert "pretrained checkpoint not found" in last_error(err)


def test_train_flag_mapping(workdir, capsys):
    tmp, cfg_path = workdir
    run(["synth", "--config", str(cfg_path)], capsys)
    out_dir = tmp / "scratch"
    code, _, _ = run(["train", "--config", str(cfg_path), "--out", str(out_dir),
                      "--no-pretrained", "--no-attention", "--no-cbfocal"], capsys)
    assert code == 0
    resolved = yaml.safe_load((out_dir / "config.resolved.yaml").read_text())
    flags = resolved["retrain"]
    assert flags["use_pretrained"] is False
    assert flags["use_mask_attention"] is False
    assert flags["use_feat_cr"] is False  # implied by --no-attention
    assert flags["use_cb_focal"] is False
    ckpt = load_checkpoint(out_dir / "trained_final.pt")
    assert ckpt.metrics["flags"] == {"use_pretrained": False, "use_mask_attention": False,
                                     "use_feat_cr": False, "use_cb_focal": False}


def test_eval_needs_checkpoint_path(workdir, capsys):
    tmp, cfg_path = workdir
    run(["synth", "--config", str(cfg_path)], capsys)
    code, _, err = run(["eval", "--config", str(cfg_path)], capsys)
    assert code == 2
    assert "checkpoint not found" in last_error(err)


def test_gradcam_needs_image_id(workdir, capsys):
    tmp, cfg_path = workdir
    cfg = yaml.safe_load(cfg_path.read_text())
    del cfg["gradcam"]["stage"]
    cfg_path.write_text(yaml.safe_dump(cfg))
    run(["synth", "--config", str(cfg_path)], capsys)
    (tmp / "train").mkdir(exist_ok=True)
    (tmp / "train" / "trained_final.pt").write_bytes(b"placeholder")
    code, _, err = run(["gradcam", "--config", str(cfg_path)], capsys)
    assert code == 2
    assert "image id" in last_error(err)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def test_full_pipeline(workdir, capsys):
    tmp, cfg_path = workdir
    assert run(["synth", "--config", str(cfg_path)], capsys)[0] == 0

    code, out, _ = run(["pretrain", "--config", str(cfg_path),
                        "--out", str(tmp / "pre")], capsys)
    assert code == 0 and "view-match accuracy" in out
    assert (tmp / "pre" / "pretrained.pt").is_file()
    log = (tmp / "pre" / "pretrain_log.csv").read_text().splitlines()
    assert log[0] == "epoch,mean_loss,contrastive_accuracy"
    assert len(log) == 2  # one epoch

    code, out, _ = run(["train", "--config", str(cfg_path),
                        "--out", str(tmp / "train")], capsys)
    assert code == 0 and "test accuracy" in out
    for name in ("trained_final.pt", "trained_best.pt", "train_steps.csv",
                 "train_epochs.csv", "eval_report.json"):
        assert (tmp / "train" / name).is_file(), name
    report = json.loads((tmp / "train" / "eval_report.json").read_text())
    assert report["total"] == 6  # per-class rounding of 0.25 * (8, 6, 5, 4)
    assert len(report["confusion"]) == 4

    code, out, _ = run(["eval", "--config", str(cfg_path),
                        "--out", str(tmp / "eval")], capsys)
    assert code == 0 and "accuracy" in out
    eval_report = json.loads((tmp / "eval" / "eval_report.json").read_text())
    assert eval_report["accuracy"] == report["accuracy"]

    code, out, _ = run(["gradcam", "--config", str(cfg_path), "--out", str(tmp / "cam"),
                        "--image", "01_0000", "--stage", "2"], capsys)
    assert code == 0
    assert (tmp / "cam" / "01_0000_stage2.png").is_file()
    assert (tmp / "cam" / "01_0000_stage2_overlay.png").is_file()

    code, _, err = run(["gradcam", "--config", str(cfg_path), "--out", str(tmp / "cam2"),
                        "--image", "missing_id"], capsys)
    assert code == 2
    assert "not found" in last_error(err)


def test_train_runs_are_repeatable(workdir, capsys):
    tmp, cfg_path = workdir
    run(["synth", "--config", str(cfg_path)], capsys)
    accs = []
    for name in ("t1", "t2"):
        code, _, _ = run(["train", "--config", str(cfg_path), "--out", str(tmp / name),
                          "--no-pretrained", "--deterministic"], capsys)
        assert code == 0
        accs.append(json.loads((tmp / name / "eval_report.json").read_text())["accuracy"])
        steps = (tmp / name / "train_steps.csv").read_text()
        if name == "t1":
            first_steps = steps
    assert accs[0] == accs[1]
    assert steps == first_steps


def test_ablate_writes_report(workdir, capsys):
    tmp, cfg_path = workdir
    run(["synth", "--config", str(cfg_path)], capsys)
    cfg = yaml.safe_load(cfg_path.read_text())
    cfg["retrain"]["epochs"] = 1
    cfg_path.write_text(yaml.safe_dump(cfg))
    code, out, _ = run(["ablate", "--config", str(cfg_path),
                        "--out", str(tmp / "abl")], capsys)
    assert code == 0
    for row in ("plain-ce", "+pretrain", "+attention", "+featcr", "+cbfocal"):
        assert row in out
    lines = (tmp / "abl" / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 6
    assert (tmp / "abl" / "pretrained_seed0.pt").is_file()
    assert (tmp / "abl" / "pretrained_seed1.pt").is_file()
