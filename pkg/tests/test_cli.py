import json

import numpy as np
import pytest

from lesionkit.cli import EX_IO, EX_OK, EX_USAGE, EX_VALIDATION, main
from lesionkit.volgrid import Mask, ProbabilityMap, read_volume, write_volume

SMALL_CONFIG = {
    "phantom": {"dims": [32, 32, 32], "count_mean": 2.0, "diameter_range": [3.0, 12.0]},
    "train": {"epochs": 2, "iters_per_epoch": 4, "batch_size": 3, "patch_size": [16, 16, 16]},
    "n_train": 3,
    "n_test": 3,
    "losses": ["bce", "iwbce"],
    "study": {"n_cases": 3},
    "study_phantom": {"dims": [32, 32, 32], "noise_sigma": 0.0, "diameter_range": [4.0, 12.0]},
    "metrics": {"bootstrap_iters": 5},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture
def phantoms(tmp_path, config):
    out = tmp_path / "ph"
    assert main(["phantom", "gen", "--config", str(config), "--cases", "3", "--seed", "1",
                 "--with-prob", "--out", str(out)]) == EX_OK
    return out


def test_phantom_gen_outputs(phantoms):
    manifest = json.loads((phantoms / "manifest.json").read_text())
    assert [c["id"] for c in manifest["cases"]] == ["case000", "case001", "case002"]
    assert isinstance(read_volume(phantoms / "case000_gt.rvol"), Mask)
    catalog = json.loads((phantoms / "case000_catalog.json").read_text())
    assert all("diameter_mm" in l for l in catalog)
    run = json.loads((phantoms / "run.json").read_text())
    assert run["args"]["seed"] == 1 and "version" in run


def test_label_and_weights(tmp_path, phantoms):
    gt = phantoms / "case000_gt.rvol"
    assert main(["label", "--mask", str(gt), "--out", str(tmp_path / "lab")]) == EX_OK
    sizes = json.loads((tmp_path / "lab" / "sizes.json").read_text())
    assert sum(sizes["sizes"]) == 32 ** 3
    assert main(["weights", "--mask", str(gt), "--beta", "0.01", "--out", str(tmp_path / "w")]) == EX_OK
    doc = json.loads((tmp_path / "w" / "weights.json").read_text())
    total = sum(doc["component_sizes"])
    for w, n in zip(doc["component_weights"][1:], doc["component_sizes"][1:]):
        assert w * n == pytest.approx(0.01 * total, rel=1e-12)


def test_loss_command(tmp_path, phantoms, capsys):
    args = ["loss", "--prob", str(phantoms / "case000_prob.rvol"), "--mask", str(phantoms / "case000_gt.rvol")]
    assert main(args + ["--kind", "bce", "--out", str(tmp_path / "l")]) == EX_OK
    doc = json.loads((tmp_path / "l" / "loss.json").read_text())
    assert doc["loss_kind"] == "bce" and doc["value"] > 0
    code = main(args + ["--kind", "iwbce", "--out", str(tmp_path / "l2")])
    assert code == EX_VALIDATION
    assert "--weights" in capsys.readouterr().err


def test_loss_geometry_mismatch(tmp_path):
    write_volume(ProbabilityMap(np.zeros((4, 4, 4), np.float32)), tmp_path / "p.rvol")
    write_volume(Mask(np.zeros((4, 4, 5), np.uint8)), tmp_path / "m.rvol")
    assert main(["loss", "--kind", "bce", "--prob", str(tmp_path / "p.rvol"), "--mask",
                 str(tmp_path / "m.rvol"), "--out", str(tmp_path / "o")]) == EX_VALIDATION


def test_sample_train_predict_prc(tmp_path, phantoms, config):
    manifest = str(phantoms / "manifest.json")
    assert main(["sample", "--manifest", manifest, "-n", "4", "--patch-size", "16", "16", "16",
                 "--seed", "3", "--out", str(tmp_path / "s")]) == EX_OK
    index = json.loads((tmp_path / "s" / "index.json").read_text())
    assert len(index["patches"]) == 4
    assert read_volume(tmp_path / "s" / "patch00000_image.rvol").dims == (16, 16, 16)

    assert main(["train", "--manifest", manifest, "--config", str(config), "--seed", "2",
                 "--out", str(tmp_path / "t")]) == EX_OK
    log = (tmp_path / "t" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,mean_loss" and len(log) == 3

    assert main(["predict", "--model", str(tmp_path / "t" / "model.json"), "--image",
                 str(phantoms / "case000_image.rvol"), "--out", str(tmp_path / "p")]) == EX_OK
    prob = read_volume(tmp_path / "p" / "prob.rvol")
    assert prob.dims == (32, 32, 32) and prob.values.max() <= 1

    assert main(["prc", "--manifest", manifest, "--bootstrap-iters", "5", "--out", str(tmp_path / "c")]) == EX_OK
    header = (tmp_path / "c" / "prc.csv").read_text().splitlines()[0]
    assert header == "threshold,tp,fp,fn,precision,recall,recall_lo,recall_hi,precision_lo,precision_hi"
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert {"median_lesion_dice", "operating_point", "target_precision"} <= summary.keys()


def test_prc_without_probabilities(tmp_path, phantoms):
    doc = json.loads((phantoms / "manifest.json").read_text())
    for c in doc["cases"]:
        c.pop("prob")
    (phantoms / "noprob.json").write_text(json.dumps(doc))
    assert main(["prc", "--manifest", str(phantoms / "noprob.json"), "--out", str(tmp_path / "c")]) == EX_VALIDATION


def test_rater_eval(tmp_path, config):
    st = tmp_path / "st"
    assert main(["phantom", "study", "--config", str(config), "--cases", "3", "--seed", "4",
                 "--out", str(st)]) == EX_OK
    assert main(["rater-eval", "--study", str(st / "study.json"), "--out", str(tmp_path / "re")]) == EX_OK
    table1 = (tmp_path / "re" / "table1.csv").read_text().splitlines()
    assert table1[0] == "rater,1v3,1p_v3,1p_v3p,p_I,p_II"
    assert table1[-1].startswith("All data")
    doc = json.loads((st / "study.json").read_text())
    del doc["cases"][0]["raters"][1]["cnn_init"]
    (st / "broken.json").write_text(json.dumps(doc))
    assert main(["rater-eval", "--study", str(st / "broken.json"), "--out", str(tmp_path / "re2")]) == EX_VALIDATION


def test_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == EX_USAGE
    assert main([]) == EX_USAGE
    assert main(["label", "--out", str(tmp_path)]) == EX_USAGE
    assert main(["label", "--mask", str(tmp_path / "missing.rvol"), "--out", str(tmp_path / "o")]) == EX_IO
    (tmp_path / "bad.rvol").write_bytes(b"garbage-bytes" * 5)
    assert main(["label", "--mask", str(tmp_path / "bad.rvol"), "--out", str(tmp_path / "o")]) == EX_VALIDATION
    assert main(["phantom", "gen", "--cases", "0", "--out", str(tmp_path / "o")]) == EX_VALIDATION
    capsys.readouterr()


def test_writes_only_inside_out(tmp_path, phantoms, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["label", "--mask", str(phantoms / "case000_gt.rvol"), "--out", "o"]) == EX_OK
    assert [p.name for p in work.iterdir()] == ["o"]
    assert sorted(p.name for p in (work / "o").iterdir()) == ["labels.rvol", "run.json", "sizes.json"]


def test_repro_small_config_is_byte_deterministic(tmp_path, config):
    for name in ("a", "b"):
        assert main(["repro", "--config", str(config), "--seed", "7", "--out", str(tmp_path / name)]) == EX_OK
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert any(p.name == "table1.csv" for p in files_a)
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
