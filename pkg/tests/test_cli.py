import json
import os
import subprocess
import sys

import numpy as np
import pytest

from freeadv.cli import main
from freeadv.data import Dataset, save_idx

IDX_CONFIG = """
[data]
kind = idx
train_images = train-images.gz
train_labels = train-labels.gz
val_images = val-images.gz
val_labels = val-labels.gz
[model]
kind = convnet
channels = 2, 3
hidden = 6
[train]
regime = free
m = 2
epochs = 2
batch_size = 10
lr = 0.02
eps = 20
[eval]
attacks = pgd-3, fgsm
eval_n = 12
[surface]
examples = 1
grid_n = 3
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    for split, n in (("train", 30), ("val", 15)):
        imgs = rng.integers(0, 256, (n, 10, 10)).astype(np.float32)
        labels = np.arange(n) % 3
        ds = Dataset(imgs, labels, (0.0, 255.0), 10, split=split)
        save_idx(ds, tmp_path / f"{split}-images.gz", tmp_path / f"{split}-labels.gz")
    (tmp_path / "exp.ini").write_text(IDX_CONFIG)
    monkeypatch.setenv("FREEADV_OUT", str(tmp_path / "out"))
    return tmp_path


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_run_eval_surface_ledger(workdir, capsys):
    assert main(["run", str(workdir / "exp.ini")]) == 0
    out = workdir / "out"
    assert {"manifest.json", "checkpoint.ftck", "report.csv", "surface_0000.csv"} <= {p.name for p in out.iterdir()}
    report = (out / "report.csv").read_text()
    capsys.readouterr()

    (out / "report.csv").unlink()
    assert main(["eval", str(out / "checkpoint.ftck"), str(workdir / "exp.ini")]) == 0
    again = (out / "report.csv").read_text()
    strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]  # noqa: E731
    assert strip(again) == strip(report)

    assert main(["surface", str(out / "checkpoint.ftck"), str(workdir / "exp.ini")]) == 0
    assert "surface_0000.csv" in capsys.readouterr().out

    assert main(["ledger", str(out / "manifest.json")]) == 0
    assert capsys.readouterr().out.startswith("ledger ok (free)")


def test_ledger_mismatch_exit_code(workdir, capsys):
    main(["run", str(workdir / "exp.ini")])
    path = workdir / "out" / "manifest.json"
    m = json.loads(path.read_text())
    m["ledger"]["backward_count"] += 1
    path.write_text(json.dumps(m))
    capsys.readouterr()
    assert main(["ledger", str(path)]) == 5
    err = _error(capsys)
    assert err["error"] == "ledger" and "expected" in err["message"]


def test_config_error_names_key(workdir, capsys):
    cfg = workdir / "exp.ini"
    cfg.write_text(IDX_CONFIG.replace("val_images = val-images.gz\n", ""))
    assert main(["run", str(cfg)]) == 2
    err = _error(capsys)
    assert err == {"error": "config", "key": "data.val_images", "message": err["message"]}


def test_missing_file_names_path(workdir, capsys):
    (workdir / "train-labels.gz").unlink()
    assert main(["run", str(workdir / "exp.ini")]) == 3
    err = _error(capsys)
    assert err["error"] == "io" and err["path"].endswith("train-labels.gz")


def test_corrupt_data_file(workdir, capsys):
    (workdir / "val-images.gz").write_bytes(b"\0\0\x08\x03" + bytes(12))
    assert main(["run", str(workdir / "exp.ini")]) == 4
    assert _error(capsys)["error"] == "data"


def test_checkpoint_model_mismatch(workdir, capsys):
    main(["run", str(workdir / "exp.ini")])
    cfg = workdir / "exp.ini"
    cfg.write_text(IDX_CONFIG.replace("hidden = 6", "hidden = 7"))
    capsys.readouterr()
    assert main(["eval", str(workdir / "out" / "checkpoint.ftck"), str(cfg)]) == 1
    assert "does not match" in _error(capsys)["message"]


def test_module_entry_point(workdir):
    env = dict(os.environ, FREEADV_OUT=str(workdir / "sub"))
    proc = subprocess.run([sys.executable, "-m", "freeadv.cli", "ledger", str(workdir / "none.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 3
    assert json.loads(proc.stderr)["error"] == "io"
