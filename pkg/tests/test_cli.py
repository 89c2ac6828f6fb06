import json
import sys
from pathlib import Path

import numpy as np
import pytest

from synthloc.cli import main
from synthloc.raster import read_floatmap

MEAN_SCORER = f"{sys.executable} -m synthloc.pbat_mean {{in}} {{out}}"


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["toygen", "--n", "6", "--size", "64", "--seed", "1", "--out", str(root / "toy")]) == 0
    assert main(["toygen", "--n", "3", "--size", "64", "--seed", "2", "--out", str(root / "pristine")]) == 0
    assert main(["splice", "--hosts", str(root / "toy" / "real"), "--donors",
                 f"nn={root / 'toy' / 'synthetic'}", f"nn2={root / 'pristine' / 'synthetic'}",
                 "--n", "4", "--patch-side", "16", "--seed", "3", "--out", str(root / "spliced")]) == 0
    return root


def test_toygen_layout(corpus):
    toy = corpus / "toy"
    assert len(list((toy / "real").iterdir())) == 6
    assert json.loads((toy / "toygen.json").read_text()) == {"n": 6, "seed": 1, "size": 64}


def test_splice_outputs(corpus):
    sp = corpus / "spliced"
    man = json.loads((sp / "manifest.json").read_text())
    assert man["group_counts"] == {"nn": 2, "nn2": 2}
    assert len(list((sp / "images").iterdir())) == 4
    cfg = json.loads((sp / "config.json").read_text())
    assert cfg["version"] == 1 and cfg["splice_side"] == 16


def test_evaluate_oracle(corpus, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", str(corpus / "spliced"), "--scorer", "oracle", "--patch-size", "16",
                 "--stride", "4", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["groups"]) == {"nn", "nn2"}
    assert len(report["images"]) == 4
    assert report["overall"]["auc"] >= 0.95
    assert "overall" in (out / "report.txt").read_text()


def test_evaluate_workers_agree(corpus, tmp_path):
    base = ["evaluate", str(corpus / "spliced"), "--scorer", "oracle", "--patch-size", "16", "--stride", "8"]
    assert main(base + ["--out", str(tmp_path / "w1")]) == 0
    assert main(base + ["--workers", "4", "--out", str(tmp_path / "w4")]) == 0
    a = json.loads((tmp_path / "w1" / "report.json").read_text())
    b = json.loads((tmp_path / "w4" / "report.json").read_text())
    assert a["overall"]["auc"] == pytest.approx(b["overall"]["auc"], rel=1e-9)
    assert a["overall"]["max_ba"] == pytest.approx(b["overall"]["max_ba"], rel=1e-9)


def test_sweep_stride(corpus, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(corpus / "spliced"), "--scorer", "oracle", "--patch-size", "16",
                 "--axis", "stride", "--values", "4", "8", "16", "--out", str(out)]) == 0
    results = json.loads((out / "sweep.json").read_text())["results"]
    assert [r["stride"] for r in results] == [4, 8, 16]
    assert len((out / "sweep.txt").read_text().strip().splitlines()) == 2 + 3


def test_sweep_rejects_large_patch(corpus, tmp_path):
    out = tmp_path / "big"
    assert main(["sweep", str(corpus / "spliced"), "--axis", "patch_size", "--values", "32", "128",
                 "--out", str(out)]) == 2
    assert not out.exists()


def test_localize_outputs(corpus, tmp_path):
    img = corpus / "spliced" / "images" / "00000.png"
    out = tmp_path / "loc"
    assert main(["localize", str(img), "--scorer", "external", "--command", MEAN_SCORER,
                 "--patch-size", "16", "--stride", "8", "--tau", "0.5", "--out", str(out)]) == 0
    heat = read_floatmap(out / "00000.hmap")
    assert heat.values.shape == (64, 64)
    assert (out / "00000_heatmap.png").is_file() and (out / "00000_mask.png").is_file()


def test_train_and_calibrate(corpus, tmp_path):
    run = ["train", "--data", str(corpus / "toy"), "--patch-size", "8", "--patches-per-image", "6",
           "--batch-size", "4", "--max-epochs", "2", "--seed", "0", "--out", str(tmp_path / "tr")]
    assert main(run) == 0
    first = snapshot(tmp_path / "tr")
    assert set(first) == {"model.mnet", "history.json", "split.json", "config.json"}
    assert main(run) == 0
    assert snapshot(tmp_path / "tr") == first

    ckpt = str(tmp_path / "tr" / "model.mnet")
    cal = ["calibrate", str(corpus / "spliced"), "--pristine", str(corpus / "pristine" / "real"),
           "--scorer", "micronet", "--checkpoint", ckpt, "--patch-size", "8", "--stride", "8"]
    assert main(cal + ["--out", str(tmp_path / "cal")]) == 0
    doc = json.loads((tmp_path / "cal" / "calibration.json").read_text())
    assert 0.0 <= doc["tau_star"] <= 1.0
    assert doc["reference"]["tau"] == 0.736 and doc["reference"]["correct_detection_rate"] == 0.993
    assert json.loads((tmp_path / "cal" / "tau.json").read_text())["tau"] == doc["tau_star"]
    assert main(cal + ["--workers", "4", "--out", str(tmp_path / "cal4")]) == 0
    doc4 = json.loads((tmp_path / "cal4" / "calibration.json").read_text())
    assert doc4["correct_detection_rate"] == pytest.approx(doc["correct_detection_rate"], rel=1e-9)


def test_calibrate_oracle_no_false_alarms(corpus, tmp_path):
    # pristine images have empty masks, so the oracle scores them all 0
    assert main(["calibrate", str(corpus / "spliced"), "--pristine", str(corpus / "pristine" / "real"),
                 "--patch-size", "16", "--stride", "8", "--out", str(tmp_path / "c")]) == 0
    doc = json.loads((tmp_path / "c" / "calibration.json").read_text())
    assert doc["correct_detection_rate"] == 1.0


@pytest.mark.parametrize("cmd", [
    ["toygen", "--n", "2", "--size", "64", "--seed", "4"],
    ["evaluate", "{spliced}", "--patch-size", "16", "--stride", "8"],
    ["sweep", "{spliced}", "--patch-size", "16", "--axis", "stride", "--values", "8", "16"],
    ["localize", "{spliced}/images/00001.png", "--mask", "{spliced}/masks/00001.png",
     "--patch-size", "16", "--stride", "8", "--tau", "0.5"],
    ["splice", "--hosts", "{toy}/real", "--donors", "g={toy}/synthetic", "--n", "2", "--patch-side", "8"],
])
def test_rerun_byte_identical(corpus, tmp_path, cmd):
    args = [a.format(spliced=corpus / "spliced", toy=corpus / "toy") for a in cmd]
    out = tmp_path / "o"
    assert main(args + ["--out", str(out)]) == 0
    first = snapshot(out)
    assert first
    assert main(args + ["--out", str(out)]) == 0
    assert snapshot(out) == first


def test_config_file_and_flag_precedence(corpus, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "patch": {"size": 16, "stride": 16}}))
    out = tmp_path / "o"
    assert main(["evaluate", str(corpus / "spliced"), "--config", str(cfg), "--stride", "8",
                 "--out", str(out)]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["patch"] == {"size": 16, "stride": 8}


@pytest.mark.parametrize("bad", [
    {"version": 2},
    {"bogus": 1},
    {"patch": {"size": 4}},
    {"train": {"batch_size": 3}},
])
def test_bad_config_leaves_no_outputs(corpus, tmp_path, bad):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    out = tmp_path / "never"
    assert main(["evaluate", str(corpus / "spliced"), "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_validation_exit_codes(corpus, tmp_path):
    out = tmp_path / "x"
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", str(empty), "--out", str(out)]) == 2
    assert main(["evaluate", str(corpus / "spliced"), "--scorer", "micronet", "--out", str(out)]) == 2
    assert main(["evaluate", str(corpus / "spliced"), "--workers", "0", "--out", str(out)]) == 2
    assert main(["localize", str(tmp_path / "nope.png"), "--out", str(out)]) == 2
    assert main(["splice", "--hosts", str(corpus / "toy" / "real"), "--donors",
                 str(corpus / "toy" / "synthetic"), "--n", "0", "--out", str(out)]) == 2
    assert main(["toygen", "--n", "2", "--size", "30", "--out", str(out)]) == 2
    assert not out.exists()


def test_runtime_error_exit_code(corpus, tmp_path):
    bad = tmp_path / "bad.mnet"
    bad.write_bytes(b"garbage")
    assert main(["evaluate", str(corpus / "spliced"), "--scorer", "micronet", "--checkpoint", str(bad),
                 "--patch-size", "16", "--stride", "16", "--out", str(tmp_path / "o")]) == 3
