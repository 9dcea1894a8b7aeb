import csv
import json
import os
import subprocess
import sys

import pytest

from seelab.cli import load_config, main
from seelab.errors import ConfigurationError

FAST = ["check", "linear-example2", "--only", "mp", "--only", "adjoint", "--paths", "2000",
        "--steps", "32"]


def _report(path):
    data = json.loads((path / "report.json").read_text())
    data.pop("timestamp")
    return data


def test_list(capsys):
    assert main(["list"]) == 0
    text = capsys.readouterr().out
    assert "linear-example2" in text and "heat-example1" in text and "lq-oracle" in text
    assert main(["list", "--json"]) == 0
    names = [row["name"] for row in json.loads(capsys.readouterr().out)]
    assert names == sorted(names)


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["check", "linear-example2", "--only", "nonsense"])
    assert info.value.code == 2


@pytest.mark.parametrize("argv", [
    ["run", "heat-example1", "--steps", "0"],
    ["run", "no-such-experiment"],
    ["run", "linear-example2", "--tol-scale", "-1"],
    ["run", "linear-example2", "--workers", "0"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(FAST + ["--out", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err


def test_check_writes_report_and_csv(tmp_path, capsys):
    assert main(FAST + ["--out", str(tmp_path)]) == 0
    data = _report(tmp_path)
    assert data["pass"] and set(data["checks"]) == {"sampling", "mp", "adjoint"}
    assert data["seed"] == 0 and data["config"]["paths"] == 2000
    for name in ("mp", "adjoint"):
        raw = (tmp_path / f"{name}.csv").read_bytes()
        assert b"\r\n" not in raw
        rows = list(csv.DictReader(raw.decode("utf-8").splitlines()))
        assert rows and list(rows[0]) == ["t", "quantity", "estimate", "stderr"]
        assert all(float(r["stderr"]) >= 0 for r in rows)


def test_report_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(FAST + ["--out", str(a)]) == 0
    assert main(FAST + ["--out", str(b), "--workers", "3"]) == 0
    assert _report(a) == _report(b)
    for name in ("mp.csv", "adjoint.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_too_few_paths_fails_but_writes(tmp_path, capsys):
    argv = ["check", "linear-example2", "--only", "mp", "--paths", "10", "--out", str(tmp_path)]
    assert main(argv) == 1
    data = _report(tmp_path)
    assert not data["pass"] and not data["checks"]["sampling"]["pass"]


def test_json_output_and_env_default(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SEELAB_OUT", str(tmp_path / "env"))
    assert main(FAST + ["--json"]) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["experiment"] == "linear-example2"
    assert "PASS" in captured.err
    assert (tmp_path / "env" / "report.json").exists()


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[experiment]\nname = linear-example2\n\n[run]\npaths = 2000\nsteps = 32\n"
                   f"checks = mp, adjoint\nout = {tmp_path / 'out'}\n\n[params]\nseed = 5\n")
    assert main(["run", str(cfg)]) == 0
    data = _report(tmp_path / "out")
    assert data["seed"] == 5 and set(data["checks"]) == {"sampling", "mp", "adjoint"}


@pytest.mark.parametrize("body, match", [
    ("[experiment]\nname = lq-oracle\n[run]\nbogus = 1\n", "unknown keys"),
    ("[experiment]\nname = lq-oracle\n[extra]\n", "unknown config sections"),
    ("[run]\npaths = 3\n", "needs"),
])
def test_bad_config(tmp_path, body, match):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(body)
    with pytest.raises(ConfigurationError, match=match):
        load_config(cfg)


def test_console_entry_point(tmp_path):
    env = dict(os.environ, SEELAB_OUT=str(tmp_path))
    proc = subprocess.run([sys.executable, "-m", "seelab.cli", "list"], capture_output=True,
                          text=True, env=env, check=False)
    assert proc.returncode == 0 and "lq-oracle" in proc.stdout
