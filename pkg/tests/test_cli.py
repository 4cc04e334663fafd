import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from crackscan import cli
from crackscan.evaluation import evaluate_predictions
from crackscan.report import MODEL_ORDER, parse_csv

from conftest import SITE_DIRS, patch, write_tree


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One MobileNetV3Small run on a tiny synthetic tree, shared by the downstream commands."""
    base = tmp_path_factory.mktemp("cli")
    root = write_tree(base / "data", {(s, l): 2 for s in SITE_DIRS for l in ("Crack", "No_crack")})
    out = base / "train"
    code = cli.main(["train", "--data-root", str(root), "--backbone", "MobileNetV3Small", "--case", "3",
                     "--regime", "scratch", "--epochs", "1", "--out", str(out)])
    assert code == 0
    return root, out


def test_prepare(crack_ch_like, tmp_path, capsys):
    out = tmp_path / "prep"
    assert cli.main(["prepare", "--data-root", str(crack_ch_like), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["samples"] == 98
    assert "deficit" in summary["splits"]["0"]["error"]
    for k in (2, 3, 4, 5):
        assert (out / f"split_case{k}.json").exists()
    assert json.loads((out / "config.json").read_text())["command"] == "prepare"
    assert json.loads(capsys.readouterr().out)["samples"] == 98


def test_prepare_rescale(crack_ch_like, tmp_path):
    out = tmp_path / "prep"
    assert cli.main(["prepare", "--data-root", str(crack_ch_like), "--rescale", "--out", str(out)]) == 0
    assert (out / "split_case0.json").exists() and (out / "split_case1.json").exists()


def test_train_outputs(trained):
    _, out = trained
    for name in ("config.json", "split_case3.json", "record.json", "curves.png", "report.json",
                 "confusion_MobileNetV3Small_3.json", "model/metadata.json", "model/weights.weights.h5"):
        assert (out / name).exists(), name
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train.epochs"] == 1 and cfg["backbone"] == "MobileNetV3Small"
    report = json.loads((out / "report.json").read_text())
    assert report["case_id"] == 3 and report["regime"] == "SCRATCH"
    assert report["lr"] == 8.5e-4  # from the case-3 learning-rate column


def test_eval_with_saved_split(trained, tmp_path, capsys):
    _, out = trained
    ev = tmp_path / "ev"
    assert cli.main(["eval", "--model", str(out / "model"), "--split", str(out / "split_case3.json"), "--out", str(ev)]) == 0
    a = json.loads((ev / "report.json").read_text())
    b = json.loads((out / "report.json").read_text())
    assert a["confusion"]["counts"] == b["confusion"]["counts"]
    assert "MobileNetV3Small" in (ev / "report.md").read_text()
    assert capsys.readouterr().out.startswith("| model")


def test_localize(trained, tmp_path):
    root, out = trained
    img = next((root / "Naillac" / "Crack").iterdir())
    loc = tmp_path / "loc"
    assert cli.main(["localize", "--model", str(out / "model"), "--image", str(img), "--force-crack", "--out", str(loc)]) == 0
    side = json.loads((loc / f"{img.stem}_cam.json").read_text())
    assert side["cam_class"] == "Crack"
    assert np.load(loc / f"{img.stem}_cam.npy").shape == (7, 7)
    assert Image.open(loc / f"{img.stem}_cam.png").size == (224, 224)


def test_scan(trained, tmp_path):
    _, out = trained
    big = tmp_path / "wall.png"
    Image.fromarray(patch(np.random.default_rng(1), True, 300)[:260]).save(big)
    sc = tmp_path / "scan"
    assert cli.main(["scan", "--model", str(out / "model"), "--image", str(big), "--out", str(sc)]) == 0
    fused = np.load(sc / "wall_fused.npy")
    assert fused.shape == (260, 300)
    rows = (sc / "windows.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4 * 3


def test_scan_small_image_is_typed_error(trained, tmp_path, capsys):
    _, out = trained
    small = tmp_path / "small.png"
    Image.fromarray(patch(np.random.default_rng(1), True, 100)).save(small)
    code = cli.main(["scan", "--model", str(out / "model"), "--image", str(small), "--runs-dir", str(tmp_path / "runs")])
    assert code == 9
    assert capsys.readouterr().err.startswith("error: shape:")
    assert not any((tmp_path / "runs").iterdir())


def test_report(trained, tmp_path):
    _, out = trained
    rep = tmp_path / "rep"
    assert cli.main(["report", str(out), "--out", str(rep)]) == 0
    rows = parse_csv((rep / "report.csv").read_text())
    assert len(rows) == 1 and rows[0]["model"] == "MobileNetV3Small"
    assert (rep / "accuracy_scratch.png").exists()


def test_unknown_backbone(tmp_path, capsys):
    runs = tmp_path / "runs"
    code = cli.main(["train", "--backbone", "AlexNet", "--runs-dir", str(runs)])
    assert code == 4
    err = capsys.readouterr().err
    assert err.startswith("error: registry:") and len(err.strip().splitlines()) == 1
    assert not runs.exists()


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--learning-rate", "3"])
    assert exc.value.code == 2


def test_missing_data_root(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.DATA_ENV, raising=False)
    runs = tmp_path / "runs"
    assert cli.main(["prepare", "--runs-dir", str(runs)]) == 3
    assert "CRACKSCAN_DATA" in capsys.readouterr().err
    assert not any(runs.iterdir())


def test_config_file_and_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"train": {"epochs": 7, "lr": 0.01}, "backbone": "Xception"}))
    args = cli.build_parser().parse_args(["train", "--config", str(conf), "--epochs", "3"])
    cfg = cli.resolve_config(args)
    assert cfg["train.epochs"] == 3 and cfg["train.lr"] == 0.01 and cfg["backbone"] == "Xception"
    conf.write_text(json.dumps({"train": {"epoch": 3}}))
    with pytest.raises(cli.ConfigurationError, match="train.epoch"):
        cli.resolve_config(args)


def _fake_cell(cfg, split, cell_dir):
    rng = np.random.default_rng([MODEL_ORDER.index(cfg["backbone"]), cfg["case_id"]])
    y = np.array([0, 1] * 5)
    p = np.where(rng.random(10) < 0.8, y, 1 - y)
    return evaluate_predictions(y, p, cfg["backbone"], cfg["case_id"], regime=cfg["regime"], epochs=50, lr=1e-4,
                                wall_time_seconds=float(cfg["case_id"] + 1))


def _matrix(out, backbones, cases, cell=_fake_cell):
    return cli.run_matrix(backbones, cases, "SCRATCH", dict(cli.DEFAULTS), out, cell=cell, split_for=lambda k: k)


def test_matrix_full_grid(tmp_path):
    reports, errors = _matrix(tmp_path / "a", MODEL_ORDER, list(range(6)))
    assert len(reports) == 66 and errors == []
    rows = parse_csv((tmp_path / "a" / "report.csv").read_text())
    assert len(rows) == 66
    assert {(r["model"], r["case"]) for r in rows} == {(m, c) for m in MODEL_ORDER for c in range(6)}
    _matrix(tmp_path / "b", MODEL_ORDER, list(range(6)))
    assert (tmp_path / "a" / "report.csv").read_text() == (tmp_path / "b" / "report.csv").read_text()


def test_matrix_single_cell(tmp_path):
    reports, _ = _matrix(tmp_path, ["Xception"], [4])
    assert len(parse_csv((tmp_path / "report.csv").read_text())) == 1


def test_matrix_failed_cell_is_skipped(tmp_path):
    def cell(cfg, split, d):
        if cfg["backbone"] == "VGG19":
            raise RuntimeError("out of memory")
        return _fake_cell(cfg, split, d)

    reports, errors = _matrix(tmp_path, ["VGG16", "VGG19", "Xception"], [0, 1], cell=cell)
    assert len(reports) == 4
    logged = json.loads((tmp_path / "errors.json").read_text())
    assert [(e["backbone"], e["case"]) for e in logged] == [("VGG19", 0), ("VGG19", 1)]
