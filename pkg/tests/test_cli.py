import json
from dataclasses import replace

import pytest

from cli.cli import CHECKPOINT_NAME, main
from dproto.dataset import load_manifest

from tests.conftest import tiny_config


def _gen(out, *extra):
    return main(["gen-data", "--out", str(out), "--classes", "2", "--per-class", "4",
                 "--size", "16", "--seed", "3", "--test-fraction", "0.25", *extra])


def _train(tmp_path, data, out, *extra):
    config = tmp_path / "tiny.json"
    tiny_config().save(config)
    return main(["train", "--data", str(data), "--out", str(out), "--config", str(config), *extra])


def test_gen_data_writes_a_manifest(tmp_path, capsys):
    assert _gen(tmp_path / "d") == 0
    manifest = load_manifest(tmp_path / "d")
    assert len(manifest) == 8
    assert len(manifest.split("test")) == 2
    assert "Manifeste écrit" in capsys.readouterr().out


def test_gen_data_error_codes(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--classes", "0"]) == 2
    assert _gen(tmp_path / "d") == 0
    assert _gen(tmp_path / "d") == 3
    assert _gen(tmp_path / "d", "--force") == 0


def test_invalid_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("DPROTO_THREADS", "0")
    assert _gen(tmp_path / "d") == 2


def test_verify_counts(capsys):
    assert main(["verify", "--max-grid", "4"]) == 0
    out = capsys.readouterr().out
    assert "concordent" in out
    assert "4x4" in out


def test_train_writes_its_outputs(tmp_path):
    _gen(tmp_path / "d")
    assert _train(tmp_path, tmp_path / "d", tmp_path / "run", "--epochs", "0") == 0
    run = tmp_path / "run"
    assert (run / CHECKPOINT_NAME).read_bytes().startswith(b"DPROTO1\n")
    assert (run / "epochs.csv").read_text(encoding="utf-8").startswith("epoch,total")
    metrics = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["epochs"] == 0 and metrics["pushes"] == []
    saved = json.loads((run / "config.json").read_text(encoding="utf-8"))
    assert saved["protolayer"]["num_classes"] == 2
    assert saved["backbone"]["input_size"] == [16, 16, 3]


def test_identical_seeds_give_identical_runs(tmp_path):
    _gen(tmp_path / "d")
    assert _train(tmp_path, tmp_path / "d", tmp_path / "a", "--epochs", "2") == 0
    assert _train(tmp_path, tmp_path / "d", tmp_path / "b", "--epochs", "2") == 0
    for name in (CHECKPOINT_NAME, "metrics.json", "epochs.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text(encoding="utf-8"))
    assert [p["epoch"] for p in metrics["pushes"]] == [2]


def test_missing_data_and_config(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "run")]) == 3
    _gen(tmp_path / "d")
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run"),
                 "--config", str(tmp_path / "absent.json")]) == 2


def test_untrained_checkpoint_cannot_be_explained(tmp_path):
    _gen(tmp_path / "d")
    _train(tmp_path, tmp_path / "d", tmp_path / "run", "--epochs", "0")
    image = tmp_path / "d" / "images" / "00000.ppm"
    assert main(["explain", "--checkpoint", str(tmp_path / "run" / CHECKPOINT_NAME),
                 "--image", str(image), "--out", str(tmp_path / "exp")]) == 2


@pytest.mark.slow
def test_explain_without_provenance_falls_back_to_the_image(tmp_path, capsys):
    _gen(tmp_path / "d")
    config = tmp_path / "tiny.json"
    cfg = tiny_config()
    cfg.with_overrides(trainer=replace(cfg.trainer, epochs=1, warmup_epochs=1, push_period=50)).save(config)
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run"),
                 "--config", str(config)]) == 0
    image = tmp_path / "d" / "images" / "00000.ppm"
    assert main(["explain", "--checkpoint", str(tmp_path / "run" / CHECKPOINT_NAME),
                 "--image", str(image), "--out", str(tmp_path / "exp"), "--steps", "3"]) == 0
    assert "Attention" in capsys.readouterr().out
    assert sorted(p.name for p in (tmp_path / "exp").iterdir()) == [
        "binary_x.ppm", "bundle.json", "cam_x.ppm", "heatmap_x.ppm"]


@pytest.mark.slow
def test_eval_writes_reports(tmp_path):
    _gen(tmp_path / "d")
    _train(tmp_path, tmp_path / "d", tmp_path / "run", "--epochs", "0")
    ckpt = str(tmp_path / "run" / CHECKPOINT_NAME)
    # un modèle non entraîné ne peut pas être expliqué
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "ev"), "--limit", "1"]) == 2

    _train(tmp_path, tmp_path / "d", tmp_path / "run1", "--epochs", "1")
    ckpt = str(tmp_path / "run1" / CHECKPOINT_NAME)
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "ev"), "--limit", "1", "--steps", "3"]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text(encoding="utf-8"))
    assert set(metrics) >= {"mdm"}
    assert (tmp_path / "ev" / "curves.csv").exists()
    assert (tmp_path / "ev" / "sweep.csv").exists()


def test_eval_needs_a_test_split(tmp_path):
    _gen(tmp_path / "d")
    _train(tmp_path, tmp_path / "d", tmp_path / "run", "--epochs", "0")
    main(["gen-data", "--out", str(tmp_path / "all-train"), "--classes", "2", "--per-class", "2",
          "--size", "16", "--test-fraction", "0"])
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / CHECKPOINT_NAME),
                 "--data", str(tmp_path / "all-train"), "--out", str(tmp_path / "ev")]) == 2
