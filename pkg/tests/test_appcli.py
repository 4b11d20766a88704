import numpy as np
import pytest

from sadamp import ann
from sadamp.appcli import ConfigError, cli, load_dataset, load_model, parse_config, write_atomic

CASE_INI = """
[grid]
L_g = 4e-3
R_g = 0.2
"""

DAMPED_INI = CASE_INI + """
[sad]
omega_c = 1005.31
H_v = 1.8
"""


def _ini(tmp_path, text, name="case.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _run(tmp_path, ini, *args):
    return cli(["--config", _ini(tmp_path, ini), "--out-dir", str(tmp_path / "out"), *args])


def test_analyze_reports_unstable_case(tmp_path, capsys):
    assert _run(tmp_path, CASE_INI, "analyze") == 0
    text = capsys.readouterr().out
    assert "verdict = unstable" in text
    report = (tmp_path / "out" / "analysis_report.txt").read_text()
    assert report.startswith("## analyze ") and "verdict = unstable" in report
    assert (tmp_path / "out" / "trajectories.csv").exists()
    # a second run appends rather than replaces
    assert _run(tmp_path, DAMPED_INI, "analyze") == 0
    report = (tmp_path / "out" / "analysis_report.txt").read_text()
    assert report.count("## analyze ") == 2 and "verdict = stable" in report


def test_tune_reaches_threshold(tmp_path, capsys):
    assert _run(tmp_path, CASE_INI, "tune") == 0
    lines = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    assert float(lines["margin"]) >= 0.1 and lines["idle"] == "0"


def test_sweep_writes_csv(tmp_path, capsys):
    assert _run(tmp_path, CASE_INI, "sweep", "--values", "0.4,1.0") == 0
    rows = (tmp_path / "out" / "sweep_power.csv").read_text().splitlines()
    assert rows[0].startswith("value,") and len(rows) == 3


@pytest.mark.parametrize("text, needle", [
    ("[system]\npower = 1\n", "[grid]"),
    (CASE_INI + "colour = blue\n", "colour"),
    (CASE_INI + "[gird]\nL_g = 1\n", "[gird]"),
    ("[grid]\nL_g = 4e-3\n", "R_g"),
    ("[grid]\nL_g = 4e-3\nR_g = lots\n", "R_g"),
    ("[grid]\nL_g = 0\nR_g = 0\n", "[grid]"),
    (CASE_INI + "[sad]\nbeta = 0.5\n", "[sad]"),
    (CASE_INI + "[analysis]\nf_min = 10\nf_max = 1\n", "[analysis]"),
])
def test_bad_configs_exit_with_code_2(tmp_path, capsys, text, needle):
    assert _run(tmp_path, text, "analyze") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: config:") and needle in err and "\n" not in err


def test_usage_and_file_errors_exit_with_code_2(tmp_path, capsys):
    assert cli(["analyze", "--power", "lots"]) == 2
    assert cli(["--config", str(tmp_path / "missing.ini"), "analyze"]) == 2
    assert cli(["frobnicate"]) == 2
    assert capsys.readouterr().err.count("error: ") == 3


def test_config_defaults_and_damper_switch():
    cfg = parse_config(CASE_INI)
    assert cfg.sad is None and cfg.grid.L_g == 4e-3 and cfg.analysis["points"] == 2000
    cfg = parse_config(DAMPED_INI)
    assert cfg.sad.H_v == 1.8
    cfg = parse_config(DAMPED_INI + "enabled = off\n")
    assert cfg.sad is None
    with pytest.raises(ConfigError):
        parse_config(DAMPED_INI + "enabled = maybe\n")
    cfg = parse_config("[grid]\nL_g = 4e-3   ; henry\nR_g = 0.2\n[sad]  ; on\n")
    assert cfg.grid.L_g == 4e-3 and cfg.sad is not None


def test_dataset_train_and_model_round_trip(tmp_path, capsys):
    base = ["--out-dir", str(tmp_path), "--seed", "3"]
    assert cli(base + ["dataset", "--kind", "admittance", "--scan-points", "8"]) == 0
    ds_path = tmp_path / "dataset_admittance.csv"
    ds = load_dataset(ds_path)
    assert ds.X.shape == (8 * 15, 5) and ds.Y.shape == (8 * 15, 8)
    model_path = tmp_path / "adm.model"
    assert cli(base + ["--config", _ini(tmp_path, CASE_INI + "[training]\nmax_epochs = 300\n"),
                       "train", "--dataset", str(ds_path), "--model", str(model_path)]) == 0
    m = load_model(model_path)
    assert m.input_names == ds.input_names and m.seed == 3
    assert ann.model_to_text(m) == model_path.read_text()
    assert np.all(np.isfinite(ann.predict(m, ds.X).value))


def test_corrupt_model_is_an_input_error(tmp_path, capsys):
    bad = tmp_path / "x.model"
    bad.write_text("sadamp-mlp 99\n")
    assert cli(["--config", _ini(tmp_path, DAMPED_INI), "adapt", "--sad-model", str(bad)]) == 2
    assert "version" in capsys.readouterr().err


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "a" / "b.txt"
    write_atomic(p, "one\n")
    write_atomic(p, "two\n")
    assert p.read_text() == "two\n"
    assert [q.name for q in p.parent.iterdir()] == ["b.txt"]
