import csv
import io
import json
import subprocess
import sys

import pytest

from cirsv.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_price_json(capsys):
    code, out, _ = run(capsys, "price")
    assert code == 0
    data = json.loads(out)
    assert data["price"] == pytest.approx(0.9699912929, abs=1e-9)
    assert data["in_range"] is True


def test_zero_epsilon_matches_leading_order(capsys):
    _, a, _ = run(capsys, "price", "--eps", "0")
    _, b, _ = run(capsys, "price", "--order", "0")
    assert json.loads(a)["price"] == json.loads(b)["price"]


def test_moments_and_density(capsys):
    code, out, _ = run(capsys, "moments")
    assert code == 0
    m = json.loads(out)
    assert m["sigma2"] == pytest.approx(0.075, rel=1e-9)
    assert m["K1"] == pytest.approx(2 * -100 / 1.1832 * m["D"])
    code, out, _ = run(capsys, "density", "--points", "11")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["y", "g"] and len(rows) == 12


def test_term_structure_columns(capsys, tmp_path):
    coeffs = tmp_path / "coeffs.json"
    code, out, _ = run(capsys, "term-structure", "--n-tau", "5", "--tau-max", "2",
                       "--coeffs-json", str(coeffs))
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["tau", "R_order0", "R_order1", "R_order2"]
    assert len(rows) == 6
    assert float(rows[-1][0]) == 2.0
    assert len(json.loads(coeffs.read_text())["time_grid"]) >= 400


def test_outputs_carry_sidecar_and_replay(capsys, tmp_path):
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    assert run(capsys, "price", "--r", "0.05", "--maturity", "2", "--y", "0.04", "-o", str(first))[0] == 0
    meta = json.loads((tmp_path / "a.json.meta.json").read_text())
    assert meta["config"]["r"] == 0.05 and meta["command"] == "price"
    assert run(capsys, "price", "--config", str(first) + ".meta.json", "-o", str(second))[0] == 0
    assert first.read_bytes() == second.read_bytes()


def test_flat_config_and_override(capsys, tmp_path):
    cfg = tmp_path / "model.cfg"
    cfg.write_text("# reference with a faster rate\nkappa = 6\nr = 0.04\n")
    _, a, _ = run(capsys, "price", "--config", str(cfg))
    _, b, _ = run(capsys, "price", "--kappa", "6", "--r", "0.04")
    _, c, _ = run(capsys, "price", "--config", str(cfg), "--r", "0.03")
    assert a == b
    assert json.loads(c)["price"] != json.loads(a)["price"]


def test_residual_eps_list_from_config(capsys, tmp_path):
    cfg = tmp_path / "res.cfg"
    cfg.write_text("eps = 0.001,0.004\n")
    code, out, _ = run(capsys, "residual", "--config", str(cfg))
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert [float(r[0]) for r in rows[1:]] == [0.001, 0.004]


def test_simulate_and_calibrate_smoke(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--paths", "200", "--horizon", "0.05", "--eps", "0.1",
                       "--dump-paths", str(tmp_path / "paths.csv"), "--n-store", "3")
    assert code == 0
    data = json.loads(out)
    assert 0 < data["price"] <= 1 and data["std_error"] > 0
    assert len((tmp_path / "paths.csv").read_text().splitlines()) == 1 + 200 * 3
    series = tmp_path / "rates.csv"
    series.write_text("t,r\n" + "".join(f"{i},{0.03 + 0.001 * (i % 7)}\n" for i in range(400)))
    code, out, _ = run(capsys, "calibrate", "--input", str(series),
                       "--kde-output", str(tmp_path / "kde.csv"))
    assert code == 0
    assert len(out.splitlines()) == 21
    assert (tmp_path / "kde.csv.meta.json").exists()


@pytest.mark.parametrize("argv, kind", [
    (["price", "--t", "2"], "invalid-parameters"),
    (["simulate", "--dt", "0.01"], "step-too-large"),
    (["simulate", "--measure", "physical", "--paths", "10", "--eps", "0.1", "--horizon", "0.01",
      "--y0", "50"], "invalid-parameters"),
    (["calibrate", "--input", "/nonexistent/rates.csv"], "computation-error"),
])
def test_computation_errors_exit_one(capsys, argv, kind):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert json.loads(err)["error"] == kind


def test_negative_rate_file(capsys, tmp_path):
    f = tmp_path / "neg.csv"
    f.write_text("t,r\n0,0.03\n1,-0.01\n")
    code, _, err = run(capsys, "calibrate", "--input", str(f))
    assert code == 1
    assert json.loads(err)["error"] == "negative-rates"
    assert "line 3" in json.loads(err)["message"]


@pytest.mark.parametrize("argv", [[], ["bogus"], ["price", "--order", "3"], ["price", "--r", "abc"]])
def test_usage_errors_exit_two(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 1\n")
    assert run(capsys, "price", "--config", str(cfg))[0] == 2


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "cirsv.cli", "moments"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "sigma2" in json.loads(out.stdout)


def test_residual_default_sweep(capsys):
    code, out, _ = run(capsys, "residual", "--format", "json")
    assert code == 0
    data = json.loads(out)
    assert data["eps"] == [0.001, 0.004, 0.016]
    assert abs(data["slope"] - 0.5) < 0.1
