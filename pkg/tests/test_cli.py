import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from freehorizon.cli import OutputError, main, read_sweep_csv, write_sweep_csv
from freehorizon.config import SCENARIO_DIR, ConfigError, load_config, parse_config
from freehorizon.horizon import SweepRecord

UNICYCLE_TEXT = (SCENARIO_DIR / "unicycle.toml").read_text()


def _write(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_bundled_car_cases():
    c1 = load_config("car_case1")
    np.testing.assert_allclose(c1.x0, [0, 0, math.pi / 3, 0], rtol=0, atol=0)
    np.testing.assert_allclose(c1.cost.goal, [1, 4, math.pi / 2, 0], rtol=0, atol=0)
    assert c1.M == 0.05 and c1.model.name == "car_like"
    c2 = load_config("car_case2")
    np.testing.assert_allclose(c2.x0, [-1, -4, math.pi / 3, 0], rtol=0, atol=0)
    np.testing.assert_array_equal(c2.cost.goal, c1.cost.goal)
    assert c2.M == 0.05


def test_dare_terminal_in_config():
    cfg = load_config("double_integrator")
    P = cfg.cost.Q_T
    assert P.shape == (2, 2) and np.all(np.linalg.eigvalsh(P) > 0)


def test_pi_expressions():
    cfg = parse_config(UNICYCLE_TEXT.replace('goal = [1, 1, "pi/2"]', 'goal = [1, 1, "-2*pi/4 + pi"]'))
    assert cfg.cost.goal[2] == pytest.approx(math.pi / 2, abs=1e-15)
    with pytest.raises(ConfigError, match="cost.goal"):
        parse_config(UNICYCLE_TEXT.replace('"pi/2"', '"__import__(\'os\')"'))


@pytest.mark.parametrize(
    "old, new, key",
    [
        ("M = 0.05", "M = 0.05\nbeta = 1.5", "cost.beta"),
        ("M = 0.05", "M = 0.0", "cost.M"),
        ("M = 0.05", "M = 0.05\nQt = [1, 1, 1]", "cost.Qt"),
        ("Q = [1, 1, 1]", "Q = [1, 1]", "cost.Q"),
        ("R = [0.1, 0.1]", "R = [0.1, -0.1]", "cost.R"),
        ("x0 = [0, 0, 0]", "x0 = [0, 0]", "scenario.x0"),
        ("t_step = 5", "t_step = 2.5", "sweep.t_step"),
        ('name = "unicycle"\ndt', 'name = "boat"\ndt', "model.name"),
    ],
)
def test_invalid_values_name_key_and_line(old, new, key):
    text = UNICYCLE_TEXT.replace(old, new, 1)
    assert text != UNICYCLE_TEXT
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key
    line = info.value.line
    assert line is not None
    assert text.splitlines()[line - 1].strip().startswith(key.split(".")[1])


def test_unknown_section_and_missing_key():
    with pytest.raises(ConfigError) as info:
        parse_config(UNICYCLE_TEXT + "\n[plotting]\ncolor = 1\n")
    assert info.value.key == "plotting"
    with pytest.raises(ConfigError) as info:
        parse_config(UNICYCLE_TEXT.replace("M = 0.05\n", ""))
    assert info.value.key == "cost.M"
    with pytest.raises(ConfigError) as info:
        parse_config(UNICYCLE_TEXT.replace("[cost]", "[cost"))
    assert info.value.line is not None


def test_write_sweep_csv_contract(tmp_path):
    rec = SweepRecord(7, 1.0 / 3.0, 0.1 + 0.2, 1e-17, False, True, 12)
    path = tmp_path / "sweep.csv"
    write_sweep_csv([rec], path)
    raw = path.read_bytes()
    assert raw.count(b"\n") == 2 and b"\r" not in raw
    assert raw.splitlines()[0] == b"T,total_cost,transfer_cost,terminal_phi,hit,converged,iterations"
    recs = [SweepRecord(T, 10.0 / T, np.pi * T, 0.05 * T, T > 3, True, T) for T in (9, 1, 5)]
    write_sweep_csv(recs, path)
    back = read_sweep_csv(path)
    assert back == sorted(recs, key=lambda r: r.T)
    assert read_sweep_csv(tmp_path / "sweep.csv")[0].T == 1
    with pytest.raises(ValueError):
        write_sweep_csv([], path)
    with pytest.raises(OutputError, match="missing"):
        write_sweep_csv([rec], tmp_path / "missing" / "sweep.csv")


def test_solve_at_goal(tmp_path, capsys):
    text = UNICYCLE_TEXT.replace("x0 = [0, 0, 0]", 'x0 = [1, 1, "pi/2"]')
    code, _, _ = _run(capsys, "solve", "--config", _write(tmp_path, text), "--horizon", "10", "--output-dir", str(tmp_path / "o"))
    assert code == 0
    with open(tmp_path / "o" / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 11
    assert list(rows[0]) == ["k", "x_0", "x_1", "x_2", "u_0", "u_1", "stage_cost"]
    assert all(float(r["stage_cost"]) <= 1e-8 for r in rows[:-1])
    assert rows[-1]["stage_cost"] == ""


def _manifest_ok(out: Path) -> dict:
    manifest = json.loads((out / "manifest.json").read_text())
    for name in manifest["files"]:
        assert (out / name).is_file(), name
    return manifest


def test_sweep_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = _run(capsys, "sweep", "--config", "unicycle", "--output-dir", str(out))
    assert code == 0
    recs = read_sweep_csv(out / "sweep.csv")
    hits = [r.hit for r in recs]
    assert sum(a != b for a, b in zip(hits, hits[1:])) == 1
    ac = json.loads((out / "ac_result.json").read_text())
    assert ac["J_M"] == pytest.approx(ac["transfer_cost"] + 0.05, abs=1e-12)
    assert ac["T_star"] == min(r.T for r in recs if r.hit)
    manifest = _manifest_ok(out)
    assert manifest["status"] == "ok" and manifest["command"] == "sweep"
    assert set(manifest["files"]) == {"sweep.csv", "ac_result.json", "manifest.json"}
    assert "sweep" in manifest["timings"]


def test_outputs_are_deterministic_and_echo_reruns(tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    _run(capsys, "msweep", "--config", "unicycle", "--output-dir", str(a), "--m-values", "0.5,0.05")
    _run(capsys, "msweep", "--config", "unicycle", "--output-dir", str(b), "--m-values", "0.5,0.05")
    assert (a / "msweep.csv").read_bytes() == (b / "msweep.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["msweep"]["m_values"] == [0.5, 0.05]
    echo = _write(tmp_path, manifest["config_toml"], "echo.toml")
    code, _, _ = _run(capsys, "msweep", "--config", echo, "--output-dir", str(c))
    assert code == 0
    assert (c / "msweep.csv").read_bytes() == (a / "msweep.csv").read_bytes()


def test_discounted_output(tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = _run(capsys, "discounted", "--config", "unicycle", "--beta", "0.95", "--budget", "100", "--output-dir", str(out))
    assert code == 0
    with open(out / "discounted.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert float(row["beta"]) == 0.95 and row["entered"] == "true"
    assert int(row["T_star"]) > 0


def test_check_exit_codes(tmp_path, capsys):
    out = tmp_path / "o"
    code, stdout, _ = _run(capsys, "check", "--config", "unicycle", "--output-dir", str(out))
    assert code == 0
    reports = [json.loads(line) for line in (out / "checks.jsonl").read_text().splitlines()]
    assert len(reports) == 4 and all(r["passed"] for r in reports)
    assert stdout.count("PASS") == 4
    strict = _write(tmp_path, UNICYCLE_TEXT.replace("stride = 5", "stride = 5\ntol = 1e-12"))
    code, stdout, _ = _run(capsys, "check", "--config", strict, "--output-dir", str(tmp_path / "p"))
    assert code == 1 and "FAIL" in stdout
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["status"] == "checks_failed"


def test_error_exits_emit_json(tmp_path, capsys):
    code, _, err = _run(capsys, "msweep", "--config", "unicycle", "--m-values", "0.1,0.5", "--output-dir", str(tmp_path / "a"))
    assert code == 2
    assert json.loads(err)["error"]["type"] == "ConfigError"
    code, _, err = _run(capsys, "discounted", "--config", "unicycle", "--beta", "1.5", "--output-dir", str(tmp_path / "b"))
    assert code == 2 and json.loads(err)["error"]["key"] == "--beta"
    code, _, err = _run(capsys, "sweep", "--config", str(tmp_path / "nope.toml"))
    assert code == 2
    short = _write(tmp_path, UNICYCLE_TEXT.replace("t_max = 200", "t_max = 6"))
    out = tmp_path / "c"
    code, _, err = _run(capsys, "sweep", "--config", short, "--output-dir", str(out))
    assert code == 3
    assert json.loads(err)["error"]["type"] == "HittingTimeNotFoundError"
    manifest = _manifest_ok(out)
    assert manifest["status"] == "error" and "sweep.csv" in manifest["files"]


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["solve", "--config", "unicycle"])
    assert info.value.code == 2
