import json
from pathlib import Path

import pytest

from fraclab.cli import main, make_nonlinearity, plotdata
from fraclab.config import ConfigError, parse_config

LAYER = """[experiment]
name = layer
s = 0.5
n = 1
seed = 0

[layer]
X = 10
N = 201
tol = 1e-6
"""


def test_parse_defaults_and_overrides():
    cfg = parse_config(LAYER)
    assert cfg.experiment == "layer" and cfg.s == 0.5
    assert cfg.layer.X == 10.0 and cfg.layer.N == 201
    assert cfg.energy.R_list == (4.0, 8.0, 16.0, 32.0)
    cfg2 = parse_config(LAYER + "\n[energy]\nR_list = 2, 4\n")
    assert cfg2.energy.R_list == (2.0, 4.0)
    assert cfg.digest() != cfg2.digest()


def test_digest_ignores_output_location():
    a = parse_config(LAYER)
    b = parse_config(LAYER.replace("seed = 0", "seed = 0\noutput_dir = elsewhere"))
    assert a.digest() == b.digest()


@pytest.mark.parametrize("text, line, where", [
    (LAYER.replace("s = 0.5", "s = 1.5"), 3, "experiment.s"),
    (LAYER.replace("N = 201", "N = 200"), 9, "layer.N"),
    (LAYER.replace("tol = 1e-6", "tol = fast"), 10, "layer.tol"),
    (LAYER.replace("X = 10", "Xmax = 10"), 8, "layer.Xmax"),
    (LAYER + "\n[extra]\nfoo = 1\n", 12, "extra"),
    (LAYER.replace("name = layer", "name = nothing"), 2, "experiment.name"),
])
def test_parse_errors_name_the_line(text, line, where):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}: {where}")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="experiment.s"):
        parse_config("[experiment]\nname = layer\n")


def test_nonlinearity_spec():
    assert make_nonlinearity("cubic").name == "cubic"
    nl = make_nonlinearity("0, 1, 0, -1")
    assert nl.f(0.5) == pytest.approx(0.375)
    with pytest.raises(ConfigError):
        make_nonlinearity("quartic")


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_run_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, LAYER)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    (da,), (db,) = list((tmp_path / "a").iterdir()), list((tmp_path / "b").iterdir())
    man = json.loads((da / "manifest.json").read_text())
    assert man["config"]["experiment"] == "layer" and "wall_time_s" in man
    csvs = sorted(p.name for p in da.glob("*.csv"))
    assert csvs and csvs == sorted(p.name for p in db.glob("*.csv"))
    for name in csvs:
        assert (da / name).read_bytes() == (db / name).read_bytes()


def test_seed_override_changes_the_run_directory(tmp_path):
    cfg = _write(tmp_path, LAYER)
    assert main(["run", "--config", cfg, "--out", str(tmp_path), "--seed", "7"]) == 0
    (d,) = list(tmp_path.glob("*/manifest.json"))
    assert json.loads(d.read_text())["config"]["seed"] == 7


def test_exit_code_for_config_errors(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 2
    cfg = _write(tmp_path, LAYER.replace("N = 201", "N = 200"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "line 9: layer.N" in capsys.readouterr().err


def test_exit_code_for_numerical_failure(tmp_path, capsys):
    cfg = _write(tmp_path, LAYER.replace("tol = 1e-6", "tol = 1e-30"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_exit_code_for_invariant_failure(tmp_path, capsys):
    text = LAYER.replace("s = 0.5", "s = 0.25").replace("X = 10", "X = 2").replace("N = 201", "N = 41")
    assert main(["run", "--config", _write(tmp_path, text), "--out", str(tmp_path)]) == 4
    assert "invariant failure" in capsys.readouterr().err


def test_plotdata(tmp_path):
    csv = tmp_path / "rescaling.csv"
    csv.write_text("eps,form,kinetic,potential\n1.0,2.0,3.0,-1.0\n0.5,-1.0,2.0,-3.0\n")
    target = plotdata(csv, "rescaling")
    desc = json.loads(Path(target).read_text())
    assert desc["kind"] == "rescaling" and desc["x_axis"]["label"] == "eps"
    assert desc["series"][0]["x"] == [1.0, 0.5]
    assert main(["plotdata", "--in", str(csv), "--kind", "rescaling"]) == 0


def test_plotdata_errors(tmp_path, capsys):
    csv = tmp_path / "t.csv"
    csv.write_text("eps,form\n1.0,2.0\n")
    with pytest.raises(ConfigError, match="missing column 'kinetic'"):
        plotdata(csv, "rescaling")
    assert main(["plotdata", "--in", str(csv), "--kind", "rescaling"]) == 2
    assert main(["plotdata", "--in", str(csv), "--kind", "pie"]) == 2
    assert main(["plotdata", "--in", str(tmp_path / "none.csv"), "--kind", "layer"]) == 2
