import json
from pathlib import Path

import cv2
import numpy as np
import pytest

from hexburst import ftr1
from hexburst.cli import run
from hexburst.imageio import write_srgb8
from hexburst.rawsim import load_burst, save_burst
from hexburst.scenes import random_scene


def _tree_bytes(d):
    d = Path(d)
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    for k in range(4):
        write_srgb8(d / f"img{k}.png", random_scene(128, 128, np.random.default_rng(100 + k)))
    (d / "broken.png").write_bytes(b"not a png")
    return d


@pytest.fixture(scope="module")
def dataset(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert run(["synth", "--in", str(corpus), "--out", str(out), "--frames", "4", "--seed", "7",
                "--max-shift", "8"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run(["train", "--data", str(dataset), "--config", "micro", "--steps", "6", "--batch", "2",
                "--crop", "32", "--lr", "1e-3", "--out", str(out), "--threads", "1"]) == 0
    return out


def test_synth_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    good = [e for e in manifest if "skipped" not in e]
    assert len(good) == 4 and len(manifest) == 5
    assert all(len(e["frames"]) == 4 for e in good)
    assert [e["seed"] for e in good] == sorted(e["seed"] for e in good)
    b = load_burst(dataset / "img0")
    assert b.frames[0].values.shape == (64, 64) and b.gt.shape == (3, 128, 128)


def test_synth_deterministic_across_threads(corpus, dataset, tmp_path):
    assert run(["synth", "--in", str(corpus), "--out", str(tmp_path / "a"), "--frames", "4",
                "--seed", "7", "--max-shift", "8", "--threads", "2"]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(dataset)


def test_global_flags_before_subcommand(corpus, dataset, tmp_path):
    assert run(["--seed", "7", "--threads", "1", "synth", "--in", str(corpus), "--out", str(tmp_path / "b"),
                "--frames", "4", "--max-shift", "8"]) == 0
    assert _tree_bytes(tmp_path / "b") == _tree_bytes(dataset)


def test_flow_blockmatch(dataset, tmp_path, capsys):
    assert run(["flow", "--burst", str(dataset / "img1"), "--method", "blockmatch", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "flows.json").read_text())
    assert meta["flows"] == ["flow_1.ftr", "flow_2.ftr", "flow_3.ftr"]
    raw = (tmp_path / "flow_1.ftr").read_bytes()
    assert raw[:4] == b"FTR1" and int.from_bytes(raw[4:8], "little") == 3
    f = ftr1.load(tmp_path / "flow_1.ftr")
    assert f.shape == (2, 16, 16)


def test_flow_net_without_params_is_runtime_error(dataset, tmp_path, capsys):
    code = run(["flow", "--burst", str(dataset / "img1"), "--method", "net", "--out", str(tmp_path)])
    assert code == 1
    assert "error: category=config" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as ei:
        run(["train", "--bogus"])
    assert ei.value.code == 2
    with pytest.raises(SystemExit) as ei:
        run(["frobnicate"])
    assert ei.value.code == 2
    assert "category=usage" in capsys.readouterr().err


def test_flow_finetune_and_net_infer(dataset, trained, tmp_path):
    fl = tmp_path / "flow"
    assert run(["flow-finetune", "--data", str(dataset), "--steps", "3", "--batch", "4", "--out", str(fl)]) == 0
    assert (fl / "flownet.json").exists()
    lines = (fl / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4
    out = tmp_path / "net.png"
    assert run(["infer", "--ckpt", str(trained / "checkpoint"), "--burst", str(dataset / "img2"),
                "--flow-ckpt", str(fl), "--out", str(out)]) == 0
    assert cv2.imread(str(out), cv2.IMREAD_UNCHANGED).shape == (128, 128, 3)


def test_train_outputs(trained):
    lines = (trained / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,l1,lab,total" and len(lines) == 7
    meta = json.loads((trained / "checkpoint" / "checkpoint.json").read_text())
    assert meta["step"] == 6 and meta["config"]["enc_dim"] == [4, 8]


def test_train_deterministic_across_threads(dataset, trained, tmp_path):
    assert run(["train", "--data", str(dataset), "--config", "micro", "--steps", "6", "--batch", "2",
                "--crop", "32", "--lr", "1e-3", "--out", str(tmp_path), "--threads", "3"]) == 0
    assert _tree_bytes(tmp_path) == _tree_bytes(trained)


def test_infer_png_and_raw(dataset, trained, tmp_path):
    out, raw = tmp_path / "o.png", tmp_path / "o.ftr"
    assert run(["infer", "--ckpt", str(trained / "checkpoint"), "--burst", str(dataset / "img0"),
                "--flow", "blockmatch", "--out", str(out), "--raw-out", str(raw)]) == 0
    img = cv2.imread(str(out), cv2.IMREAD_UNCHANGED)
    assert img.dtype == np.uint16 and img.shape == (128, 128, 3)
    assert ftr1.load(raw).shape == (3, 128, 128)


def test_infer_rejects_indivisible_burst(dataset, trained, tmp_path, capsys):
    b = load_burst(dataset / "img0")
    for f in b.frames:
        f.values = f.values[:60, :60]
    b.gt = b.gt[:, :120, :120]
    save_burst(tmp_path / "odd", b)
    code = run(["infer", "--ckpt", str(trained / "checkpoint"), "--burst", str(tmp_path / "odd"),
                "--flow", "blockmatch", "--out", str(tmp_path / "x.png")])
    assert code == 1
    err = capsys.readouterr().err
    assert "category=shape" in err and "divisible by" in err
    assert not (tmp_path / "x.png").exists()


def test_eval_identical_dirs(tmp_path, capsys):
    for sub in ("p", "g"):
        (tmp_path / sub).mkdir()
        for k in range(2):
            ftr1.save(tmp_path / sub / f"im{k}.ftr", np.random.default_rng(k).random((3, 16, 16)).astype(np.float32))
    assert run(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    m = rep["methods"][0]
    assert m["mean_psnr"] == "inf" and m["mean_ssim"] == 1.0
    assert "PSNR inf" in capsys.readouterr().out


def test_bench(trained, tmp_path):
    assert run(["bench", "--ckpt", str(trained / "checkpoint"), "--size", "32x32", "--repeats", "3",
                "--threads", "1", "--out", str(tmp_path / "b.json")]) == 0
    rec = json.loads((tmp_path / "b.json").read_text())
    assert rec["median_seconds"] > 0 and len(rec["times"]) == 3 and rec["params"] == 8155


def test_distill_deterministic_across_threads(dataset, trained, tmp_path):
    ck = str(trained / "checkpoint")
    args = ["distill", "--teacher1", ck, "--teacher2", ck, "--student", ck, "--data", str(dataset),
            "--val", "1", "--steps-a", "2", "--steps-b", "2", "--batch", "1", "--crop", "32", "--lr", "1e-3"]
    assert run(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert run(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    rep = json.loads((tmp_path / "a" / "distill_report.json").read_text())
    assert set(rep) >= {"one_step_val_loss", "two_step_val_loss", "psnr_before", "psnr_after"}
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
