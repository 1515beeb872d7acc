import json
import subprocess
import sys

import numpy as np
import pytest

from vitbis import vtb
from vitbis.cli import main

TINY_CFG = {
    "version": 1,
    "model": {"height": 16, "width": 16, "embed_dim": 16, "depth": 1, "num_heads": 2, "reduced_channels": 16},
    "optim": {"max_steps": 3, "batch_size": 2, "lr": 1e-3},
    "data": {"image_size": 16, "num_images": 3},
    "val_images": 2,
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CFG))
    return p


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "not found" in err


def test_bad_invocations_exit_1(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["ablate", "sideways", "--out", "x"]) == 1
    assert main(["train", "--seed", "-3", "--out", "x"]) == 1
    assert main(["predict", "--out", "x"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_config_key_exit_1(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"depthh": 2}}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exit_2(tmp_path):
    bad = tmp_path / "bad.vtb"
    bad.write_bytes(b"VTB1garbage")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(bad)]) == 2


def test_help_exit_0():
    assert main(["--help"]) == 0


def test_full_workflow(tmp_path, cfg_path, capsys):
    data_dir, run, preds = tmp_path / "data", tmp_path / "run", tmp_path / "preds"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    train_set, _ = vtb.read_vtb(data_dir / "train.vtb")
    val_set, _ = vtb.read_vtb(data_dir / "val.vtb")
    assert train_set["images"].shape == (3, 1, 16, 16) and val_set["masks"].shape == (2, 16, 16)

    assert main(["train", "--config", str(cfg_path), "--out", str(run), "--seed", "9"]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["optim"]["seed"] == 9 and len(manifest["loss_trace"]) == 3
    assert (run / "loss.csv").read_text().startswith("step,loss\n1,")

    ck = str(run / "final.vtb")
    assert main(["eval", "--checkpoint", ck, "--data", str(data_dir / "val.vtb"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text().startswith("class,dice,hd95_mm\n")

    assert main(["predict", "--checkpoint", ck, "--data", str(data_dir / "val.vtb"), "--out", str(preds)]) == 0
    files = sorted(p.name for p in preds.iterdir())
    assert files == ["pred_0000.vtb", "pred_0001.vtb"]
    mask, _ = vtb.read_vtb(preds / files[0])
    assert mask["mask"].dtype == np.uint8 and mask["mask"].shape == (16, 16)


def test_ablate_commands(tmp_path, cfg_path, capsys):
    cfg = dict(TINY_CFG, optim={"max_steps": 1, "batch_size": 2})
    cfg_path.write_text(json.dumps(cfg))
    assert main(["ablate", "upsample", "--config", str(cfg_path), "--out", str(tmp_path / "up")]) == 0
    rows = (tmp_path / "up" / "ablate_upsample.csv").read_text().splitlines()
    assert rows[0] == "Up-sampling,DSC,class_1" and [r.split(",")[0] for r in rows[1:]] == ["BI", "TC"]
    assert main(["ablate", "scale", "--config", str(cfg_path), "--out", str(tmp_path / "sc")]) == 0
    rows = (tmp_path / "sc" / "ablate_scale.csv").read_text().splitlines()
    assert rows[0] == "Depth (L),Embedding dim (d),class_1" and len(rows) == 7


def test_gradcheck_seed_7(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "all gradients pass" in out and "FAIL" not in out


def test_module_entry_point_exit_codes(tmp_path):
    run = [sys.executable, "-m", "vitbis"]
    res = subprocess.run(run + ["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 1 and "usage:" in res.stderr
    res = subprocess.run(run + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
