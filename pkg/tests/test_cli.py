import json
import subprocess
import sys

import pytest

from approxfl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def _write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


SMALL = {"schema_version": 1, "experiment": "ours:C3", "rounds": 1, "devices": 4, "clients_per_round": 2,
         "partition": {"kind": "rc"}}


def test_run_verb(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "3", "--threads", "2"]) == EXIT_OK
    assert (out / "seed3.csv").is_file() and (out / "summary.json").is_file()
    assert "top1" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {**SMALL, "rounds": -1})
    assert main(["run", "--config", cfg]) == EXIT_CONFIG
    assert "rounds" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_runtime_error_exit_code(tmp_path, capsys):
    doc = {**SMALL, "input_shape": [3, 8, 8], "model": {"arch": "cnn", "channels": [4, 4]}}
    cfg = _write(tmp_path, doc)
    # output directory path collides with a file
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    assert main(["run", "--config", cfg, "--out", str(blocker)]) == EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err


def test_breakdown_verb(tmp_path, capsys):
    cfg = _write(tmp_path, {"schema_version": 1, "model": {"arch": "resnet", "depth": 8},
                            "input_shape": [3, 16, 16], "num_classes": 10})
    out = tmp_path / "b.csv"
    assert main(["breakdown", "--config", cfg, "--batch", "4", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "C5" in text and "S4" in text
    assert out.read_text().splitlines()[0].startswith("preset,e_total_j")


def test_calibrate_and_characterize(capsys):
    assert main(["calibrate-mbm", "--bits", "3"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["3"]["correction"] == res["3"]["frozen"] == 0.0625
    assert main(["characterize-multiplier", "--kind", "mitchell", "--bits", "3"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    # [DERIVED] Mitchell worst case at m=3 is the 1/2 x 1/2 fraction pair: (2 - 2.25)/2.25
    assert res["max_rel"] == pytest.approx(1 / 9)
    assert main(["characterize-multiplier", "--kind", "mbm", "--bits", "5"]) == EXIT_RUNTIME


def test_partition_preview(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    man = tmp_path / "m.json"
    assert main(["partition-preview", "--config", cfg, "--manifest", str(man)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert len(json.loads(man.read_text())) == 4


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "approxfl", "--help"], capture_output=True, text=True)
    assert p.returncode == 0 and "partition-preview" in p.stdout
