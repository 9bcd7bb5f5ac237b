import json
import subprocess
import sys

import pytest

from eqhjb.cli import main

SMALL = """experiment: linear-verify
grid: {T: 1.0, n_s: 21, n_y: 16, closure: periodic}
model: {name: nonlocal-ode}
checks: {max_error: %s}
"""


def _write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_empty_config_names_missing_key(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, ""), "--output-dir", str(out)]) == 2
    assert "'experiment'" in capsys.readouterr().err
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == ["c.yaml"]


def test_unknown_and_mistyped_keys(tmp_path, capsys):
    assert main(["run", _write(tmp_path, "experiment: linear-verify\ncolour: red\n")]) == 2
    assert "config error at 'colour'" in capsys.readouterr().err
    assert main(["run", _write(tmp_path, "experiment: linear-verify\ngrid: {n_s: ten}\n")]) == 2
    assert "config error at 'grid.n_s'" in capsys.readouterr().err
    assert main(["run", _write(tmp_path, "experiment: nothing\n")]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_rerun_identical_apart_from_timestamp(tmp_path):
    cfg = _write(tmp_path, SMALL % "1.0e-2")
    docs = []
    for _ in range(2):
        assert main(["run", cfg, "--output-dir", str(tmp_path / "r")]) == 0
        doc = json.loads((tmp_path / "r" / "results.json").read_text())
        assert doc.pop("timestamp")
        docs.append(doc)
    assert docs[0] == docs[1] and docs[0]["pass"] is True
    files = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert "results.json" in files and "u.t4b" in files
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.yaml", "r"]


def test_failed_check_exits_one(tmp_path):
    cfg = _write(tmp_path, SMALL % "1.0e-14")
    assert main(["run", cfg, "--output-dir", str(tmp_path / "r")]) == 1
    doc = json.loads((tmp_path / "r" / "results.json").read_text())
    assert doc["pass"] is False


def test_threads_flag(tmp_path):
    cfg = _write(tmp_path, SMALL % "1.0e-2")
    assert main(["--threads", "1", "run", cfg, "--output-dir", str(tmp_path / "r")]) == 0
    assert main(["run", cfg, "--threads", "0"]) == 2


@pytest.mark.parametrize("argv", [["list"], ["--help"]])
def test_console_entry(argv):
    p = subprocess.run([sys.executable, "-m", "eqhjb.cli", *argv], capture_output=True, text=True)
    assert p.returncode == 0
    if argv == ["list"]:
        assert "merton" in p.stdout and "heat-control" in p.stdout


def test_list_is_stable(capsys):
    assert main(["list"]) == 0
    first = capsys.readouterr().out
    assert main(["list"]) == 0
    assert capsys.readouterr().out == first
    assert "merton" in first and "heat" in first
