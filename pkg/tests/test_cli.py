import json
import subprocess
import sys

import pytest

from mftcnn.cli import COMMANDS, EXIT_CONTRACT, EXIT_IO, EXIT_OK, config_digest, main, parse_config
from mftcnn.exceptions import ContractViolation


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "mftcnn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in COMMANDS:
        assert cmd in out.stdout


def test_parse_config_errors():
    assert parse_config("", "smoke").n_populations == 2
    with pytest.raises(ContractViolation, match="unknown"):
        parse_config('{"bogus": 1}')
    with pytest.raises(ContractViolation, match="line 1"):
        parse_config('{"seed": }')
    with pytest.raises(ContractViolation, match=r"scenarios\[0\].epsilon"):
        parse_config('{"scenarios": [{"label": "S1", "delta": 20, "epsilon": 1.5}]}')


def test_exit_codes(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"unknown_field": 3}')
    assert run("generate", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONTRACT
    assert run("attack", "--controller", tmp_path / "missing.txt", "--out", tmp_path / "o",
               "--scale", "smoke") == EXIT_IO
    assert run("generate", "--seed", "-1", "--out", tmp_path / "o") == EXIT_CONTRACT


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--scale", "smoke", "--seed", 3, "--out", tmp_path / d) == EXIT_OK
    for name in ("dataset.csv", "dataset.bin", "states.bin", "controls.bin", "generate.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m = json.loads((tmp_path / "a" / "manifest_generate.json").read_text())
    assert m["config_digest"] == config_digest(b"") and m["seeds"]["master"] == 3


def test_pipeline_smoke(tmp_path):
    out = tmp_path / "run"
    assert run("generate", "--scale", "smoke", "--out", out) == EXIT_OK
    assert run("train", "--scale", "smoke", "--dataset", out / "dataset.bin", "--out", out) == EXIT_OK
    assert run("attack", "--scale", "smoke", "--controller", out / "nn1.txt", "--out", out) == EXIT_OK
    assert "found" in json.loads((out / "attack.json").read_text())
    assert run("stability", "--scale", "smoke", "--controller", out / "nn1.txt", "--out", out,
               "--threads", 1) == EXIT_OK
    reports = json.loads((out / "stability.json").read_text())
    assert [r["scenario"] for r in reports] == ["S1", "S2", "S3"]
    assert all(r["M"] == 100 for r in reports)
