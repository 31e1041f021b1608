import csv
import json

import numpy as np
import pytest
from oracles import metrics_from_counts, pixel_counts
from PIL import Image

import ppmseg.layers as layers
from ppmseg.cli import main
from ppmseg.data import load_dataset
from ppmseg.gradcheck import CASES

TINY_MODEL = {
    "input_size": [48, 64],
    "encoder_stage_channels": [4, 4, 6, 6, 6],
    "decoder_channels": [6, 4, 4, 4],
    "ppm": {"bins": [1, 2, 3]},
}


def _config(path, data_dir, out_dir, **extra):
    cfg = {
        "data_dir": str(data_dir),
        "out_dir": str(out_dir),
        "batch_size": 4,
        "max_epochs": 1,
        "schedule": {"base": 0.001},
        "model": TINY_MODEL,
        **extra,
    }
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def trained(tmp_path, toy_dir):
    out = tmp_path / "run"
    cfg = _config(tmp_path / "cfg.json", toy_dir, out)
    assert main(["train", "--config", str(cfg)]) == 0
    return out


def test_make_toy(tmp_path, capsys):
    out = tmp_path / "toy"
    assert main(["make-toy", "--out", str(out), "--n", "8", "--seed", "2"]) == 0
    assert len(list(out.glob("*_segmentation.png"))) == 8
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["data_dir"] == "." and cfg["batch_size"] == 4
    assert cfg["model"]["input_size"] == [96, 128]
    assert "8 image/mask pairs" in capsys.readouterr().out


def test_train_outputs(trained):
    assert (trained / "best.ckpt").stat().st_size > 0
    rows = list(csv.reader((trained / "history.csv").open()))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_ja", "val_dc", "val_sn", "val_sp"]
    assert len(rows) == 2
    report = json.loads((trained / "metrics.json").read_text())
    assert report["best_epoch"] == 0 and len(report["validation_ids"]) == 1
    assert set(report) >= {"mean", "per_image"}


def test_crossval_writes_folds(tmp_path):
    data = tmp_path / "toy25"
    assert main(["make-toy", "--out", str(data), "--n", "25"]) == 0
    out = tmp_path / "cv"
    cfg = _config(tmp_path / "cv.json", data, out)
    assert main(["crossval", "--config", str(cfg)]) == 0
    lines = (out / "folds.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["fold", "ja", "dc", "sn", "sp", "thresholded_ja"]
    body = rows[1:]
    assert len(body) == 6 and [r[0] for r in body] == ["0", "1", "2", "3", "4", "mean"]
    vals = np.array([[float(v) for v in r[1:]] for r in body])
    np.testing.assert_allclose(vals[5], vals[:5].mean(axis=0), rtol=1e-12)
    assert len(list(out.glob("fold*.ckpt"))) == 5


def test_predict_writes_masks(tmp_path, trained):
    images = tmp_path / "imgs"
    images.mkdir()
    sizes = [(50, 70), (33, 40), (96, 128)]
    g = np.random.default_rng(0)
    for i, (h, w) in enumerate(sizes):
        Image.fromarray(g.integers(0, 255, (h, w, 3)).astype(np.uint8)).save(images / f"im{i}.png")
    out = tmp_path / "pred"
    args = ["predict", "--checkpoint", str(trained / "best.ckpt"), "--data", str(images), "--out", str(out)]
    assert main(args) == 0
    first = {}
    for i, (h, w) in enumerate(sizes):
        arr = np.asarray(Image.open(out / f"im{i}_mask.png"))
        assert arr.shape == (h, w) and set(np.unique(arr)) <= {0, 255}
        first[i] = (out / f"im{i}_mask.png").read_bytes()
    assert main(args) == 0
    assert all((out / f"im{i}_mask.png").read_bytes() == b for i, b in first.items())


def test_eval_schema_and_oracle(tmp_path, toy_dir, trained):
    out = tmp_path / "ev"
    ckpt = str(trained / "best.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(toy_dir), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert set(report) == {"mean", "per_image"}
    assert len(report["per_image"]) == 8
    # recompute the aggregates from masks written by predict
    pred_dir = tmp_path / "pred"
    assert main(["predict", "--checkpoint", ckpt, "--data", str(toy_dir), "--out", str(pred_dir)]) == 0
    per = []
    for s in load_dataset(toy_dir):
        pred = (np.asarray(Image.open(pred_dir / f"{s.id}_mask.png")) > 0).astype(np.uint8)
        per.append(metrics_from_counts(*pixel_counts(pred, s.mask)))
    for k in ("ja", "dc", "sn", "sp"):
        assert report["mean"][k] == pytest.approx(np.mean([p[k] for p in per]), abs=1e-12)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + len(CASES)
    assert all(line.rstrip().endswith("ok") for line in lines[1:])


def test_gradcheck_detects_broken_backward(monkeypatch, capsys):
    monkeypatch.setattr(layers, "_relu_backward", lambda g, x: 2 * g * (x > 0))
    assert main(["gradcheck"]) == 4
    out = capsys.readouterr().out
    assert "FAIL" in [line.split()[-1] for line in out.splitlines() if line.startswith("relu")]


def test_error_exit_codes(tmp_path, toy_dir, trained, capsys):
    assert main(["train"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"batch_size": 4,\n "max_epochs": }')
    assert main(["train", "--config", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err
    typo = _config(tmp_path / "typo.json", toy_dir, tmp_path / "o", batch_sise=3)
    assert main(["train", "--config", str(typo)]) == 1
    missing = _config(tmp_path / "m.json", tmp_path / "nowhere", tmp_path / "o")
    assert main(["train", "--config", str(missing)]) == 2
    assert "nowhere" in capsys.readouterr().err
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes((trained / "best.ckpt").read_bytes()[:200])
    assert main(["eval", "--checkpoint", str(broken), "--data", str(toy_dir)]) == 3
    assert "truncated" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1


def test_commands_leave_inputs_untouched(tmp_path, toy_dir, trained):
    before = {p.name: p.read_bytes() for p in toy_dir.iterdir()}
    main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(toy_dir), "--out", str(tmp_path / "e")])
    assert {p.name: p.read_bytes() for p in toy_dir.iterdir()} == before
