import csv
import io
import os

import numpy as np
import pytest

from sparsecot.cli import main
from sparsecot.model import ModelConfig, ModelParams, init_params

TINY = "V=8\nD=8\nH=2\nT=2\nalpha=0.75\nenc_pattern=window:w=2\ndec_self_pattern=window:w=2,causal\n"


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return path


def test_bench_writes_csv_and_svg(tmp_path, capsys):
    out = tmp_path / "bench"
    assert main(["bench", "--pattern", "full,window:w=8,causal", "--sweep", "64,128,256,512",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "cost.csv").read_text())))
    assert len(rows) == 8
    assert (out / "cost.svg").read_text().lstrip().startswith("<?xml")
    text = capsys.readouterr().out
    assert "32.2832" in text
    assert "slope=2.0000" in text


def test_bench_bad_pattern_exits_2(tmp_path, capsys):
    assert main(["bench", "--pattern", "window:w=x", "--out", str(tmp_path)]) == 2
    assert "w=x" in capsys.readouterr().err


def test_bench_non_increasing_sweep_exits_2(tmp_path):
    assert main(["bench", "--sweep", "64,32,128,256", "--out", str(tmp_path)]) == 2


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_bench_unwritable_dir_exits_3(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        assert main(["bench", "--sweep", "8,16,32,64", "--out", str(locked / "x")]) == 3
    finally:
        locked.chmod(0o700)


def test_bench_output_path_is_a_file_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["bench", "--sweep", "8,16,32,64", "--out", str(blocker / "sub")]) == 3


def test_bench_deterministic_excluding_wall(tmp_path):
    def strip(path):
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        return [{k: v for k, v in r.items() if k != "wall_ns"} for r in rows]

    for d in ("a", "b"):
        assert main(["bench", "--sweep", "8,16,32,64", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert strip(tmp_path / "a" / "cost.csv") == strip(tmp_path / "b" / "cost.csv")
    assert (tmp_path / "a" / "cost.svg").read_bytes() == (tmp_path / "b" / "cost.svg").read_bytes()


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck", "--coords", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "masked embedding dims max |grad| = 0.0" in out


def test_gradcheck_threshold_zero_fails(capsys):
    assert main(["gradcheck", "--coords", "1", "--threshold", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_oracle_default_small(capsys):
    assert main(["oracle", "--cases", "50", "--max-seq", "16", "--dense-cases", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(line.startswith("PASS") for line in lines)


def test_oracle_size_limit_exits_2(capsys):
    assert main(["oracle", "--max-n", "17"]) == 2
    assert "16" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main(["bench"]) == 2
    assert main(["nonsense"]) == 2
    (tmp_path / "bad.txt").write_text("D=7\nH=2\n")
    assert main(["gradcheck", "--config", str(tmp_path / "bad.txt")]) == 2


def test_train_zero_steps_writes_initial_checkpoint(tmp_path, tiny_cfg_file):
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(tiny_cfg_file), "--steps", "0", "--seq-len", "3",
                 "--out", str(out)]) == 0
    params, step = ModelParams.load(out / "model.ckpt")
    init = init_params(ModelConfig.load(tiny_cfg_file))
    assert step == 0
    for k in init.tensors:
        np.testing.assert_array_equal(params[k], init[k])
    assert not (out / "loss.csv").exists()


def test_train_resume_continues_curve(tmp_path, tiny_cfg_file):
    common = ["--config", str(tiny_cfg_file), "--seq-len", "3", "--batch-size", "4"]
    assert main(["train-toy", *common, "--steps", "6", "--out", str(tmp_path / "full")]) == 0
    assert main(["train-toy", *common, "--steps", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["train-toy", *common, "--steps", "3", "--resume", str(tmp_path / "a" / "model.ckpt"),
                 "--out", str(tmp_path / "b")]) == 0
    full = (tmp_path / "full" / "loss.csv").read_text().splitlines()
    first = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    second = (tmp_path / "b" / "loss.csv").read_text().splitlines()
    assert first + second[1:] == full
    assert (tmp_path / "b" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()


def test_train_outputs_deterministic(tmp_path, tiny_cfg_file):
    for d in ("a", "b"):
        assert main(["train-toy", "--config", str(tiny_cfg_file), "--steps", "4", "--seq-len", "3",
                     "--batch-size", "4", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["config.txt", "cot_trace.csv", "loss.csv", "loss.svg", "model.ckpt"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_decode_with_checkpoint(tmp_path, tiny_cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(tiny_cfg_file), "--steps", "0", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["decode", "--checkpoint", str(out / "model.ckpt"), "--tokens", "1,2,3",
                 "--max-len", "4"]) == 0
    first = capsys.readouterr().out
    assert main(["decode", "--checkpoint", str(out / "model.ckpt"), "--tokens", "1,2,3",
                 "--max-len", "4"]) == 0
    assert capsys.readouterr().out == first


def test_decode_missing_checkpoint_exits_3(tmp_path):
    assert main(["decode", "--checkpoint", str(tmp_path / "none.ckpt"), "--tokens", "1"]) == 3


def test_decode_corrupt_checkpoint_exits_2(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert main(["decode", "--checkpoint", str(tmp_path / "bad.ckpt"), "--tokens", "1"]) == 2


def test_decode_rejects_bad_tokens_and_mismatched_config(tmp_path, tiny_cfg_file):
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(tiny_cfg_file), "--steps", "0", "--out", str(out)]) == 0
    ckpt = str(out / "model.ckpt")
    assert main(["decode", "--checkpoint", ckpt, "--tokens", "1,99"]) == 2
    other = tmp_path / "other.txt"
    other.write_text("V=8\nD=16\nH=2\n")
    assert main(["decode", "--checkpoint", ckpt, "--config", str(other), "--tokens", "1"]) == 2
