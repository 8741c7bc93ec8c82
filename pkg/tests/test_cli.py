import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cdfss.cli import main
from cdfss.episodes import validate_manifest
from cdfss.formats import load_checkpoint, save_checkpoint
from cdfss.segmenter import FewShotSegmenter, ModelConfig

SMALL = {
    "forge": {"n_images_per_class": 6, "image_size": 16},
    "train": {"epochs": 2, "episodes_per_epoch": 3},
    "eval": {"n_episodes": 4},
}


def tree_bytes(root, skip=("log.txt",)):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A forged dataset and a short training run shared by the eval/diagnose tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["forge", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_forge_writes_valid_manifest(run):
    validate_manifest(json.loads((run / "data" / "manifest.json").read_text()))


def test_forge_rerun_byte_identical(run, tmp_path):
    assert main(["forge", "--config", str(run / "cfg.json"), "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(run / "data") == tree_bytes(tmp_path / "again")


def test_forge_overlapping_classes_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"forge": {"target": {"class_set": ["ring", "ellipse"]}}}))
    assert main(["forge", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "ellipse" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "typo.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    assert main(["forge", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_run_directory(run):
    out = run / "run"
    for name in ("config.resolved.json", "metrics.csv", "ckpt_epoch1.rtck", "ckpt_epoch2.rtck", "log.txt"):
        assert (out / name).is_file(), name
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == ["episode_id", "stage", "ce_loss", "iou"]
    assert len(rows) - 1 == 2 * 3 * 2
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["epochs"] == 2 and resolved["model"]["ridge"] == 1e-6


def test_train_rerun_byte_identical(run, tmp_path):
    args = ["train", "--config", str(run / "cfg.json"), "--dataset", str(run / "data"), "--out", str(tmp_path / "r")]
    assert main(args) == 0
    assert tree_bytes(run / "run") == tree_bytes(tmp_path / "r")


def test_train_missing_dataset_exit_2(run, tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2


def test_train_gradcheck_first(run, tmp_path, capsys):
    base = ["train", "--config", str(run / "cfg.json"), "--dataset", str(run / "data"), "--dtype", "float64", "--gradcheck-first"]
    assert main(base + ["--out", str(tmp_path / "ok")]) == 0
    assert "gradcheck passed" in capsys.readouterr().out
    assert main(base + ["--out", str(tmp_path / "strict"), "--tolerance", "1e-12"]) == 1
    assert not (tmp_path / "strict" / "ckpt_epoch1.rtck").exists()


def _eval(run, *extra):
    return ["eval", "--checkpoint", str(run / "run" / "ckpt_epoch2.rtck"), "--dataset", str(run / "data"), *extra]


def test_eval_output_format_and_determinism(run, capsys, tmp_path):
    assert main(_eval(run, "--out", str(tmp_path / "e"), "--dump-soft")) == 0
    first = capsys.readouterr().out
    last = first.strip().splitlines()[-1]
    assert last.startswith("mean_iou=") and len(last.split("=")[1].split(".")[1]) == 4
    assert main(_eval(run)) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "e" / "masks" / "ep0000.pgm").is_file()
    assert (tmp_path / "e" / "masks" / "ep0000_soft.rtnt").is_file()
    assert main(_eval(run, "--out", str(tmp_path / "e2"), "--dump-soft", "--jobs", "2")) == 0
    assert tree_bytes(tmp_path / "e") == tree_bytes(tmp_path / "e2")


def test_eval_uses_k_supports(run, capsys, monkeypatch):
    import cdfss.trainer as trainer

    seen = []
    original = trainer.sample_episode

    def spy(*a, **kw):
        ep = original(*a, **kw)
        seen.append(ep.k)
        return ep

    monkeypatch.setattr(trainer, "sample_episode", spy)
    assert main(_eval(run, "--k", "5", "--n", "2")) == 0
    assert seen == [5, 5]
    assert "k=5" in capsys.readouterr().out


def test_diagnose_csv(run, tmp_path):
    ckpts = [str(run / "run" / f"ckpt_epoch{e}.rtck") for e in (1, 2)]
    args = ["diagnose", "--checkpoint", *ckpts, "--dataset", str(run / "data"), "--n", "3", "--out"]
    assert main(args + [str(tmp_path / "d1")]) == 0
    assert main(args + [str(tmp_path / "d2")]) == 0
    text = (tmp_path / "d1" / "active_matching.csv").read_text()
    assert text == (tmp_path / "d2" / "active_matching.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert list(rows[0]) == ["epoch", "level", "count", "total_pairs"]
    assert len(rows) == 6
    for r in rows:
        assert 0 <= int(r["count"]) <= int(r["total_pairs"])
    assert [int(r["total_pairs"]) for r in rows[:3]] == [3 * 256 * 256, 3 * 64 * 64, 3 * 16 * 16]


def test_diagnose_zeroed_anchors_exit_2(run, tmp_path, capsys):
    arrays = load_checkpoint(run / "run" / "ckpt_epoch2.rtck")
    for k in arrays:
        if k.startswith("seat.anchor."):
            arrays[k] = np.zeros_like(arrays[k])
    bad = tmp_path / "ckpt_epoch9.rtck"
    save_checkpoint(bad, arrays)
    code = main(["diagnose", "--checkpoint", str(bad), "--dataset", str(run / "data"), "--config", str(run / "cfg.json"), "--n", "1", "--out", str(tmp_path / "d")])
    assert code == 2
    assert "degenerate" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    listed = [line.split()[0] for line in out.splitlines()[:-1]]
    assert listed == list(FewShotSegmenter(ModelConfig(image_size=16)).trainable())
    assert main(["gradcheck", "--tolerance", "1e-12"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cdfss", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("forge", "train", "eval", "diagnose", "gradcheck"):
        assert cmd in proc.stdout
