import json
import subprocess
import sys

import pytest

from nodalab.cli import main


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_spectrum_on_disk(tmp_path, capsys, oracle):
    assert run(tmp_path, "spectrum", "--domain", "disk:1", "--res", "128", "--count", "2") == 0
    out = capsys.readouterr().out.split()
    assert abs(float(out[1]) - oracle["disk_eigenvalues"][0]) / oracle["disk_eigenvalues"][0] < 1e-2
    assert (tmp_path / "spectrum.csv").read_text().startswith("n,lambda,residual")
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["command"] == "spectrum" and doc["domain"] == "disk:1"
    assert doc["resolution"] == 128 and doc["report"]["files"] == ["spectrum.csv"]
    assert set(doc["versions"]) >= {"numpy", "scipy", "scikit-image"}


def test_deficiency_table(tmp_path, capsys, oracle):
    assert run(tmp_path, "deficiency-table", "--res", "128") == 0
    lines = capsys.readouterr().out.splitlines()[1:]
    rows = [[int(t) for t in (ln.split()[0], ln.split()[2], ln.split()[3])] for ln in lines]
    assert rows == oracle["deficiency_rows"]


def test_hadamard_check(tmp_path, capsys):
    assert run(tmp_path, "hadamard-check", "--res", "128", "--mode", "1,2", "--K", "2") == 0
    doc = json.loads((tmp_path / "gradient.json").read_text())
    assert max(max(r) for r in doc["relative_error"]) < 2e-2
    assert json.loads((tmp_path / "run.json").read_text())["report"]["max_relative_error"] < 2e-2


def test_criticality(tmp_path, capsys):
    assert run(tmp_path, "criticality", "--res", "128", "--n", "3") == 0
    doc = json.loads((tmp_path / "criticality.json").read_text())
    assert doc["gradient_norm"] <= 0.05 * doc["displaced_gradient_norm"]
    assert doc["c"] == pytest.approx([0.5, 0.5], abs=1e-3)


def test_contours(tmp_path, capsys):
    assert run(tmp_path, "contours", "--res", "64", "--n", "6") == 0
    assert "nu 4 interfaces 3" in capsys.readouterr().out
    assert (tmp_path / "contours.csv").read_text().startswith("interface_id,s,x,y")


def test_minimize_short(tmp_path, capsys):
    assert run(tmp_path, "minimize", "--res", "128", "--K", "2", "--max-iters", "3") == 0
    rows = (tmp_path / "descent.csv").read_text().splitlines()
    assert rows[0] == "iteration,Lambda,gradient_norm,step" and len(rows) >= 2


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg.json"
    cfg.write_text(json.dumps({"domain": {"kind": "rectangle", "a": 1, "b": 1}, "resolution": 64, "count": 3}))
    assert run(tmp_path, "spectrum", "--config", str(cfg)) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert json.loads((tmp_path / "run.json").read_text())["domain"] == "rect:1x1"


@pytest.mark.parametrize("doc", [
    {"domain": {"kind": "disk", "r": 1}, "bogus": 1},
    {"domain": {"kind": "triangle"}},
    {"domain": "rect:1x1"},
    {"domain": {"kind": "disk", "r": 1}, "potential": "harmonic"},
])
def test_config_errors_exit_2(tmp_path, capsys, doc):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert run(tmp_path, "spectrum", "--config", str(cfg), "--res", "32") == 2
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["spectrum", "--res", "-5"],
    ["spectrum", "--count", "0"],
    ["morse-index", "--mode", "0,2"],
    ["nonsense"],
])
def test_bad_arguments_exit_2(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_mode_seed_needs_rectangle(tmp_path, capsys):
    assert run(tmp_path, "morse-index", "--domain", "disk:1", "--res", "32") == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert run(tmp_path, "criticality", "--res", "64", "--n", "1") == 1
    assert "error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nodalab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("nodalab ")
