import csv
import json

import numpy as np
import pytest

from multitask_ad.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, run_dir_for
from multitask_ad.config import load_config
from multitask_ad.data import read_manifest, save_image


def _write_config(path, toy_dir, out, **train):
    tr = dict(epochs=2, phase1_epochs=1, batch_size=8, optimizer="adam")
    tr.update(train)
    cfg = {
        "encoder": {"depth": 1, "width": 16, "heads": 2, "patch_size": 8, "image_size": 32},
        "tasks": {"tiles_per_side": 2, "decoder_width": 16, "decoder_depth": 1, "decoder_heads": 2},
        "train": tr,
        "data": {"train": str(toy_dir / "train.txt"), "val": str(toy_dir / "val.txt"),
                 "test": str(toy_dir / "test.txt")},
        "seeds": [0],
        "output_dir": str(out),
    }
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = _write_config(root / "c.json", toy_dir, root / "out")
    assert main(["train", "--config", str(cfg_path), "--seeds", "1,2"]) == EXIT_OK
    return cfg_path, load_config(cfg_path)


def test_schema_violation_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"batch_size": 0}}))
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert "train.batch_size" in capsys.readouterr().err


def test_missing_dataset_exit_2_before_training(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"train": "nowhere/train.txt"}, "output_dir": str(tmp_path / "o")}))
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert "data.train" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_seeds_exit_2(toy_dir, tmp_path):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o")
    assert main(["train", "--config", str(p), "--seeds", "a,b"]) == EXIT_CONFIG


def test_runtime_error_exit_3(toy_dir, tmp_path, capsys):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o")
    assert main(["eval", "--config", str(p)]) == EXIT_RUNTIME  # nothing trained yet
    assert "no checkpoint" in capsys.readouterr().err


def test_seeds_give_directories(trained):
    _, cfg = trained
    for seed in (1, 2):
        assert (run_dir_for(cfg, seed) / "last" / "model.json").exists()
    assert run_dir_for(cfg, 1).parent.name == cfg.fingerprint()


def test_rerun_identical_metrics(trained, tmp_path):
    cfg_path, cfg = trained
    first = (run_dir_for(cfg, 1) / "metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg_path), "--seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
    again = tmp_path / cfg.fingerprint() / "1" / "metrics.csv"
    assert again.read_bytes() == first


def test_eval_report_and_maps(trained, capsys):
    cfg_path, cfg = trained
    assert main(["eval", "--config", str(cfg_path), "--seeds", "1,2", "--maps"]) == EXIT_OK
    assert "AUROC" in capsys.readouterr().out
    root = run_dir_for(cfg, 1).parent
    report = json.loads((root / "report.json").read_text())
    assert report["seeds"] == [1, 2] and set(report["tasks"]) == {"mim", "jigsaw", "demixup", "augcls", "gencls"}
    assert 0 <= report["mean"] <= 1 and report["std"] >= 0
    rows = list(csv.DictReader(open(run_dir_for(cfg, 1) / "scores.csv")))
    test = read_manifest(cfg.data.test, "test")
    assert len(rows) == len(test.records) and {"fused", "label", "raw_mim", "pct_gencls"} <= set(rows[0])
    maps = list((run_dir_for(cfg, 1) / "maps").glob("*.map.png"))
    assert len(maps) == len(test.records)
    assert (run_dir_for(cfg, 1) / "last" / "percentiles.json").exists()


def test_eval_unlabelled_skips_auroc(trained, tmp_path, capsys):
    cfg_path, cfg = trained
    test = read_manifest(cfg.data.test, "test")
    unl = tmp_path / "unl.txt"
    unl.write_text("".join(str(r.path) + "\n" for r in test.records))
    assert main(["eval", "--config", str(cfg_path), "--seeds", "1", "--test", str(unl)]) == EXIT_OK
    assert "unavailable" in capsys.readouterr().out


def test_score_single_image(trained, tmp_path, capsys):
    cfg_path, cfg = trained
    image = str(read_manifest(cfg.data.test, "test").records[0].path)
    target = tmp_path / "m.png"
    assert main(["score", image, "--config", str(cfg_path), "--seeds", "1", "--maps", str(target)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["fused"] <= 1 and set(out["scores"]) == {"mim", "jigsaw", "demixup", "augcls", "gencls"}
    assert target.exists() and (tmp_path / "m.overlay.png").exists()


def test_ablate_small_matrix(toy_dir, tmp_path, capsys):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o", epochs=1, phase1_epochs=0)
    matrix = tmp_path / "rows.json"
    matrix.write_text(json.dumps(["10000", "11111"]))
    assert main(["ablate", "--config", str(p), "--matrix", str(matrix)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "auroc" in text and len([l for l in text.splitlines() if l.startswith(("x", "-"))]) >= 2


def test_ablate_rejects_empty_row(toy_dir, tmp_path):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o")
    matrix = tmp_path / "rows.json"
    matrix.write_text(json.dumps(["00000"]))
    assert main(["ablate", "--config", str(p), "--matrix", str(matrix)]) == EXIT_CONFIG


def test_toydata(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"toy": {"image_size": 16, "n_train": 3, "n_val": 2, "n_test": 2}}}))
    assert main(["toydata", "--config", str(p), "--out", str(tmp_path / "toy")]) == EXIT_OK
    assert len(read_manifest(tmp_path / "toy" / "train.txt", "train").records) == 3
    assert len(read_manifest(tmp_path / "toy" / "test.txt", "test").records) == 2


def test_synth_counts_and_determinism(toy_dir, tmp_path):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o")
    n = len(read_manifest(toy_dir / "train.txt", "train").records)
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "b")]) == EXIT_OK
    images = [f for f in (tmp_path / "a").glob("*.png") if "_mask" not in f.name]
    masks = list((tmp_path / "a").glob("*_mask.png"))
    assert len(images) == 2 * n and len(masks) == 2 * n
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_synth_external_gen_skips_matched(toy_dir, tmp_path):
    p = _write_config(tmp_path / "c.json", toy_dir, tmp_path / "o")
    records = read_manifest(toy_dir / "train.txt", "train").records
    ext = tmp_path / "ext"
    ext.mkdir()
    from pathlib import Path
    name = Path(records[0].path).stem
    save_image(ext / f"{name}.gen.png", np.zeros((32, 32, 3), np.float32))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "c"), "--external-gen", str(ext)]) == EXIT_OK
    assert not (tmp_path / "c" / f"{name}.gen.png").exists()
    assert (tmp_path / "c" / f"{name}.aug.png").exists()
    assert len(list((tmp_path / "c").glob("*.gen.png"))) == len(records) - 1
