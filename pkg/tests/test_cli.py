import json
import subprocess
import sys

import pytest

from mewunet import cli

TINY_NET = ["--set", "stage_channels=4,4,8,8,8", "--set", "mewb_counts=1,1,1,1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert cli.main(["synth", "--out", str(root), "--n", "6", "--extent", "16", "--seed", "2"]) == 0
    return root / "manifest.tsv"


def test_synth_output(dataset, capsys):
    assert dataset.exists()
    assert len([ln for ln in dataset.read_text().splitlines() if not ln.startswith("#")]) == 6


def test_train_then_eval(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"manifest = {dataset}\nepochs = 5\nbatch_size = 4\n")
    rc = cli.main(["train", "--config", str(cfg), "--epochs", "2", "--lr", "0.002", "--optimizer", "sgd",
                   "--seed", "3", "--branches", "hw,cw,ch,dw", "--norm", "group", "--out-dir", str(out)] + TINY_NET)
    assert rc == 0
    log = (out / "train_log.tsv").read_text().splitlines()
    # command-line flags win over the config file
    assert len(log) == 2
    assert float(log[0].split("\t")[2]) == 0.002
    meta_cfg = cli.build_train_config(cli.make_parser().parse_args(
        ["train", "--config", str(cfg), "--batch-size", "2"]))
    assert meta_cfg.epochs == 5 and meta_cfg.batch_size == 2

    capsys.readouterr()
    rc = cli.main(["eval", str(out / "best.ckpt"), "--manifest", str(dataset), "--export", str(tmp_path / "pred"),
                   "--report", str(tmp_path / "rep")])
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0] == "class\tmIoU\tDSC\tAcc\tSpe\tSen\tHD95"
    assert set(json.loads((tmp_path / "rep.json").read_text())["mean"]) == {"mIoU", "DSC", "Acc", "Spe", "Sen", "HD95"}
    assert list((tmp_path / "pred").glob("*.pgm"))


def test_fftcheck(capsys):
    assert cli.main(["fftcheck", "--trials", "3", "--max-length", "20"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(ln.startswith("[PASS]") for ln in lines)


def test_ablate_two_rows(dataset, tmp_path, monkeypatch, capsys):
    from mewunet import ablation
    monkeypatch.setattr(ablation, "ABLATION_ROWS", ablation.ABLATION_ROWS[1:2] + ablation.ABLATION_ROWS[-1:])
    rc = cli.main(["ablate", "--manifest", str(dataset), "--epochs", "1", "--seeds", "0",
                   "--out-dir", str(tmp_path), "--batch-size", "4"] + TINY_NET)
    assert rc == 0
    table = (tmp_path / "ablation.tsv").read_text().splitlines()
    assert table[0].split("\t") == ["config", "branches", "norm", "seed", "mIoU", "DSC"]
    assert len(table) == 1 + 2 + 2
    assert "median mIoU" in capsys.readouterr().out


def test_bad_input_is_reported(tmp_path, capsys):
    assert cli.main(["train", "--manifest", str(tmp_path / "missing.tsv")]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["train", "--manifest", "x", "--set", "lr"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mewunet", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("synth", "train", "eval", "gradcheck", "fftcheck", "ablate"):
        assert cmd in out.stdout
