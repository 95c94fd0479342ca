import json
import math

import numpy as np
import pytest

from oracles import two_asset_grid_max
from meanrisk.cli import main
from meanrisk.market_data import read_matrix_csv, read_vector_csv

SMALL = ["--n", "30", "--t", "60", "--seed", "4"]


def _run(tmp_path, name, *argv):
    out = tmp_path / name
    rc = main([argv[0], "--out", str(out), *argv[1:]])
    return rc, out


def _json(path):
    return json.loads(path.read_text())


def _first_line(path):
    return path.read_text().splitlines()[0]


def test_synth_writes_panel_with_provenance(tmp_path):
    rc, out = _run(tmp_path, "s", "synth", *SMALL)
    assert rc == 0
    assert {p.name for p in out.iterdir()} == {"returns.csv", "volumes.csv", "intraday.csv", "open_prices.csv"}
    head = _first_line(out / "returns.csv")
    assert head.startswith("# provenance ")
    prov = json.loads(head[len("# provenance "):])
    assert prov["seed"] == 4 and prov["command"] == "synth" and len(prov["config_hash"]) == 16
    tickers, dates, r = read_matrix_csv(out / "returns.csv")
    assert r.shape == (30, 60)


def test_optimize_long_only_weights_nonnegative(tmp_path):
    rc, out = _run(tmp_path, "o", "optimize", *SMALL, "--ratio", "fano", "--long-only")
    assert rc == 0
    _, w = read_vector_csv(out / "weights.csv")
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
    body = _json(out / "solution.json")
    assert "diversification" in body and body["long_only"] is True
    _, cols, table = read_matrix_csv(out / "comparison.csv")
    assert cols == ["E", "V", "S", "F", "kappa", "n_nonzero"] and table.shape == (2, 6)


def test_optimize_power_reports_root(tmp_path):
    rc, out = _run(tmp_path, "p", "optimize", *SMALL, "--ratio", "power", "--p", "2")
    assert rc == 0
    sol = _json(out / "solution.json")["solution"]
    assert sol["diagnostics"]["method"] == "quadratic"
    assert sol["diagnostics"]["V_root"] > 0


def _toy_inputs(tmp_path):
    (tmp_path / "e.csv").write_text("ticker,value\nA,1.0\nB,2.0\n")
    (tmp_path / "c.csv").write_text("ticker,A,B\nA,1.0,0.0\nB,0.0,1.0\n")
    return ["--expected", str(tmp_path / "e.csv"), "--covariance", str(tmp_path / "c.csv")]


def test_optimize_toy_two_asset(tmp_path):
    rc, out = _run(tmp_path, "toy", "optimize", *_toy_inputs(tmp_path), "--ratio", "fano")
    assert rc == 0
    _, w = read_vector_csv(out / "weights.csv")
    _, w_grid = two_asset_grid_max(np.eye(2), np.array([1.0, 2.0]), lambda e, v: e / v, n_grid=2_000_001)
    np.testing.assert_allclose(w, w_grid, atol=1e-5)
    assert _json(out / "solution.json")["provenance"]["seed"] is None


def test_backtest_sweep_summary(tmp_path):
    rc, out = _run(tmp_path, "b", "backtest", *SMALL, "--sweep", "--investment", "1e5")
    assert rc == 0
    rows, cols, table = read_matrix_csv(out / "summary.csv")
    assert rows == ["1", "2", "3", "4", "5"] and cols == ["ROC", "SR", "CPS"]
    assert np.all(np.isfinite(table))
    for k in range(1, 6):
        rep = _json(out / f"report_nopt{k}.json")
        assert rep["meta"]["n_opt"] == k
        assert (out / f"daily_nopt{k}.csv").exists()


def test_backtest_single_and_strategy_file(tmp_path):
    (tmp_path / "strat.cfg").write_text("n_opt = 2\nconstraints = none\n")
    rc, out = _run(tmp_path, "b1", "backtest", *SMALL, "--investment", "1e5",
                   "--strategy", str(tmp_path / "strat.cfg"))
    assert rc == 0
    rep = _json(out / "report.json")
    assert rep["meta"]["n_opt"] == 2
    # an explicit flag beats the strategy file
    rc, out = _run(tmp_path, "b2", "backtest", *SMALL, "--investment", "1e5",
                   "--strategy", str(tmp_path / "strat.cfg"), "--n-opt", "3")
    assert _json(out / "report.json")["meta"]["n_opt"] == 3


def test_outputs_are_byte_identical(tmp_path):
    argv = ("backtest", *SMALL, "--n-opt", "2", "--investment", "1e5")
    _, a = _run(tmp_path, "x", *argv)
    _, b = _run(tmp_path, "y", *argv)
    for name in ("report.json", "daily.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_density_and_riskmodel(tmp_path):
    rc, out = _run(tmp_path, "d", "density", *SMALL, "--points", "64")
    assert rc == 0
    body = _json(out / "density.json")
    assert body["n"] == 30 and body["sigma"]["bandwidth"] > 0
    _, _, curve = read_matrix_csv(out / "density_log_sigma.csv")
    assert curve.shape == (64, 1)
    rc, out = _run(tmp_path, "r", "riskmodel", *SMALL, "--remove-market-mode")
    assert rc == 0
    assert _first_line(out / "riskmodel.txt").startswith("# provenance ")
    assert _json(out / "riskmodel.json")["market_mode_removed"] is True


def test_optimize_with_saved_riskmodel(tmp_path):
    _run(tmp_path, "r", "riskmodel", *SMALL)
    tickers = _json(tmp_path / "r" / "riskmodel.json")["tickers"]
    e = tmp_path / "e.csv"
    e.write_text("ticker,value\n" + "".join(f"{t},{0.001 * (i % 5 - 2)}\n" for i, t in enumerate(tickers)))
    rc, out = _run(tmp_path, "o", "optimize", "--expected", str(e), "--riskmodel",
                   str(tmp_path / "r" / "riskmodel.txt"), "--ratio", "sharpe")
    assert rc == 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n = 20\nt = 40\nseed = 9\n")
    rc, out = _run(tmp_path, "c", "synth", "--config", str(cfg), "--seed", "5")
    assert rc == 0
    prov = json.loads(_first_line(out / "returns.csv")[len("# provenance "):])
    assert prov["seed"] == 5
    _, _, r = read_matrix_csv(out / "returns.csv")
    assert r.shape == (20, 40)


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    rc, _ = _run(tmp_path, "u", "synth", "--config", str(cfg))
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_invalid_arguments_exit_1(tmp_path):
    assert _run(tmp_path, "a", "optimize", *SMALL, "--ratio", "cubic")[0] == 1
    assert _run(tmp_path, "b", "optimize", *SMALL, "--ratio", "power")[0] == 1
    assert _run(tmp_path, "c", "synth", "--bogus", "1")[0] == 1


def test_numerical_failure_exits_2(tmp_path, capsys):
    rc, _ = _run(tmp_path, "n", "optimize", *_toy_inputs(tmp_path), "--ratio", "power", "--p", "0.1")
    assert rc == 2
    assert "numerical error" in capsys.readouterr().err


def test_missing_file_exits_3(tmp_path):
    rc, _ = _run(tmp_path, "m", "density", "--input", str(tmp_path / "nope.csv"))
    assert rc == 3


def test_density_from_csv_roundtrip(tmp_path):
    _run(tmp_path, "s", "synth", *SMALL)
    rc, out = _run(tmp_path, "d", "density", "--input", str(tmp_path / "s" / "returns.csv"))
    assert rc == 0
    assert _json(out / "density.json")["provenance"]["seed"] is None
    assert math.isfinite(_json(out / "density.json")["sigma_star"])
