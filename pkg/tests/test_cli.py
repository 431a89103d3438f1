import json
import time
from pathlib import Path

import pytest

from recttt import gradcheck
from recttt.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main

from conftest import TINY

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def tiny_json(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def trained(tiny_json, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_json), "--out", str(out)]) == EXIT_OK
    return out


def test_train_writes_checkpoint_and_log(trained):
    assert (trained / "model_recttt_seed0.rctt").exists()
    header = (trained / "model_recttt_seed0.train.csv").read_text().splitlines()[0]
    assert header == "stage,epoch,lr,loss,ce1,ce2,aux,kl"


def test_train_twice_is_bitwise_identical(trained, tiny_json, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(tiny_json), "--out", str(again)]) == EXIT_OK
    name = "model_recttt_seed0.rctt"
    assert (trained / name).read_bytes() == (again / name).read_bytes()


def test_eval_and_sweep(trained, tiny_json, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--ckpt", str(trained), "--config", str(tiny_json), "--method", "source",
                 "--out", str(out)]) == EXIT_OK
    assert (out / "report.csv").exists() and (out / "report.json").exists()
    assert main(["sweep", "--axis", "iterations", "--ckpt", str(trained), "--config", str(tiny_json),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "sweep_iterations.csv").exists()
    assert "recttt [T=0]" in capsys.readouterr().out


def test_eval_simsiam_without_checkpoint_is_config_error(trained, tiny_json, tmp_path):
    assert main(["eval", "--ckpt", str(trained), "--config", str(tiny_json), "--method", "simsiam_ttt",
                 "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_dump_features_and_export(trained, tiny_json, tmp_path):
    out = tmp_path / "dump"
    assert main(["dump-features", "--ckpt", str(trained / "model_recttt_seed0.rctt"), "--config", str(tiny_json),
                 "--corruption", "brightness", "--out", str(out)]) == EXIT_OK
    assert (out / "features_recttt_seed0_brightness.csv").exists()
    assert main(["export-data", "--config", str(tiny_json), "--corruption", "contrast",
                 "--out", str(tmp_path / "data")]) == EXIT_OK
    assert (tmp_path / "data" / "index.json").exists()


def test_config_errors_exit_2(tiny_json, tmp_path):
    assert main(["train", "--config", str(tiny_json), "--set", "train.bogus=1"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG


def test_non_finite_loss_exits_3(tiny_json, tmp_path):
    code = main(["train", "--config", str(tiny_json), "--set", "train.lr=1e12", "--out", str(tmp_path / "x")])
    assert code == EXIT_NUMERIC


@pytest.mark.parametrize("damage", ["magic", "truncate"])
def test_corrupt_checkpoint_exits_4(trained, tiny_json, tmp_path, damage, capsys):
    path = trained / "model_recttt_seed0.rctt"
    raw = path.read_bytes()
    path.write_bytes(b"JUNK" + raw[4:] if damage == "magic" else raw[:len(raw) // 2])
    assert main(["eval", "--ckpt", str(path), "--config", str(tiny_json), "--out", str(tmp_path / "e")]) == EXIT_IO
    err = capsys.readouterr().err
    assert ("BadMagicError" if damage == "magic" else "TruncatedError") in err


def test_missing_checkpoint_exits_4(tiny_json, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.rctt"), "--config", str(tiny_json)]) == EXIT_IO


def test_layout_mismatch_exits_2(trained, tiny_json, tmp_path):
    assert main(["eval", "--ckpt", str(trained), "--config", str(tiny_json), "--set", "model.channels=[4,8,8,16]",
                 "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--instances", "2"]) == EXIT_OK
    assert "all" in capsys.readouterr().out
    with gradcheck.corrupted_rule("relu"):
        assert main(["gradcheck", "--instances", "2"]) == EXIT_NUMERIC
    assert "FAILED" in capsys.readouterr().out


def test_smoke_config_under_60s(tmp_path):
    start = time.perf_counter()
    assert main(["train", "--config", str(ROOT / "configs" / "smoke.json"), "--out", str(tmp_path)]) == EXIT_OK
    assert time.perf_counter() - start < 60
    assert (tmp_path / "model_recttt_seed0.rctt").exists()
