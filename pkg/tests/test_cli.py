import csv
import json
import os

import numpy as np
import pytest

from hydrovpp import cli, fileio, presets
from hydrovpp import scenarios as sg

from .conftest import make_scenarios


def run_cli(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run_cli(["gen-data", "--preset", "desk", "--plants", "2",
                    "--horizon", "8", "--segments", "4", "--sizes", "3",
                    "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_outputs(data_dir):
    assert (data_dir / "cascade.json").exists()
    assert (data_dir / "stats.json").exists()
    assert (data_dir / "pool3_manifest.json").exists()
    cascade = fileio.load_cascade(str(data_dir / "cascade.json"))
    assert cascade.n_plants == 2


def test_gen_data_twelve_plant_capacity(tmp_path):
    code = run_cli(["gen-data", "--preset", "twelve", "--segments", "6",
                    "--sizes", "2", "--out", str(tmp_path)])
    assert code == 0
    cascade = fileio.load_cascade(str(tmp_path / "cascade.json"))
    assert cascade.n_plants == 12
    total = sum(p.capacity_mw for p in cascade.plants)
    assert abs(total - 2200.0) <= 25.0


def test_gen_data_bad_stats_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = run_cli(["gen-data", "--stats", str(bad), "--out", str(tmp_path)])
    assert code == 2


def test_solve_centralized(tmp_path, data_dir):
    out = tmp_path / "run"
    code = run_cli(["solve", "--cascade", str(data_dir / "cascade.json"),
                    "--scenarios", str(data_dir / "pool3_manifest.json"),
                    "--method", "centralized", "--out", str(out)])
    assert code == 0
    assert (out / "solution.csv").exists()
    assert (out / "bid_curves.csv").exists()
    doc = json.loads((out / "certificate.json").read_text())
    assert doc["status"] == "optimal"


def test_solve_cadmmb_artifacts(tmp_path, data_dir):
    out = tmp_path / "run"
    code = run_cli(["solve", "--cascade", str(data_dir / "cascade.json"),
                    "--scenarios", str(data_dir / "pool3_manifest.json"),
                    "--method", "cadmmb", "--rho0", "1.0",
                    "--max-iter", "4", "--out", str(out)])
    assert code in (0, 3)      # certified or budget; artifacts either way
    for name in ("trace.csv", "certificate.json", "instance_stats.json"):
        assert (out / name).exists()
    doc = json.loads((out / "certificate.json").read_text())
    assert doc["method"] == "cadmmb"
    assert "lower_bound" in doc and "upper_bound" in doc


def test_solve_admm_reports_no_gap(tmp_path, data_dir):
    out = tmp_path / "run"
    code = run_cli(["solve", "--cascade", str(data_dir / "cascade.json"),
                    "--scenarios", str(data_dir / "pool3_manifest.json"),
                    "--method", "admm", "--rho0", "1.0",
                    "--max-iter", "4", "--out", str(out)])
    assert code in (0, 3)
    doc = json.loads((out / "certificate.json").read_text())
    assert doc["gap_percent"] is None
    assert doc["certified"] is False


def test_solve_missing_input_exit_2(tmp_path):
    code = run_cli(["solve", "--cascade", "/nonexistent.json",
                    "--scenarios", "/nonexistent2.json",
                    "--out", str(tmp_path)])
    assert code == 2


def test_validate_smoke(tmp_path, data_dir):
    out = tmp_path / "val"
    code = run_cli(["validate", "--cascade", str(data_dir / "cascade.json"),
                    "--scenarios", str(data_dir / "pool3_manifest.json"),
                    "--test", str(data_dir / "pool3_manifest.json"),
                    "--sizes", "2", "--rounds", "1", "--variants", "milp",
                    "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "validation.csv")))
    assert len(rows) == 1
    assert rows[0]["training_size"] == "2"


def test_settle_end_to_end(tmp_path):
    curves_path = tmp_path / "curves.csv"
    curves_path.write_text(
        "hour,price,quantity\n0,30.0,0.0\n0,50.0,100.0\n1,45.0,50.0\n")
    realized = tmp_path / "realized.csv"
    realized.write_text(
        "hour,price_da,price_up,price_down,production_mwh\n"
        "0,50.0,58.0,45.0,100.0\n1,40.0,50.0,35.0,50.0\n")
    out = tmp_path / "settle"
    code = run_cli(["settle", "--curves", str(curves_path),
                    "--realized", str(realized), "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "settlement_summary.json").read_text())
    # hour 0: 50*100 = 5000; hour 1: price below the single point ->
    # cleared 50, delivered 50 -> 40*50 = 2000
    assert summary["total_profit"] == pytest.approx(7000.0)
    assert "fixed_bid_profit" in summary
    ledger = list(csv.DictReader(open(out / "settlement.csv")))
    assert len(ledger) == 2


def test_settle_regime_breakdown(tmp_path, data_dir):
    cascade = fileio.load_cascade(str(data_dir / "cascade.json"))
    pid = cascade.plants[-1].plant_id
    curves_path = tmp_path / "curves.csv"
    curves_path.write_text("hour,price,quantity\n0,50.0,10.0\n1,50.0,10.0\n")
    realized = tmp_path / "realized.csv"
    realized.write_text(
        f"hour,price_da,price_up,price_down,production_mwh,inflow_{pid}\n"
        "0,50.0,58.0,45.0,10.0,500.0\n1,40.0,50.0,35.0,10.0,2500.0\n")
    out = tmp_path / "settle"
    code = run_cli(["settle", "--curves", str(curves_path),
                    "--realized", str(realized),
                    "--cascade", str(data_dir / "cascade.json"),
                    "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "settlement_summary.json").read_text())
    assert "regime_profit" in summary


def test_settle_empty_realization_exit_2(tmp_path):
    curves_path = tmp_path / "curves.csv"
    curves_path.write_text("hour,price,quantity\n0,30.0,5.0\n")
    realized = tmp_path / "realized.csv"
    realized.write_text("hour,price_da,price_up,price_down,production_mwh\n")
    code = run_cli(["settle", "--curves", str(curves_path),
                    "--realized", str(realized), "--out", str(tmp_path)])
    assert code == 2


def test_settle_length_mismatch_exit_2(tmp_path):
    curves_path = tmp_path / "curves.csv"
    curves_path.write_text("hour,price,quantity\n0,30.0,5.0\n")
    realized = tmp_path / "realized.csv"
    realized.write_text("hour,price_da,price_up,price_down,production_mwh\n"
                        "0,50.0,58.0,45.0,10.0\n1,40.0,50.0,35.0,10.0\n")
    code = run_cli(["settle", "--curves", str(curves_path),
                    "--realized", str(realized), "--out", str(tmp_path)])
    assert code == 2


def test_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("HYDROVPP_SEED", "99")
    parser = cli.build_parser()
    args = parser.parse_args(["gen-data", "--out", str(tmp_path)])
    assert args.seed == 99


def _trace_without_timing(path):
    rows = list(csv.DictReader(open(path)))
    for r in rows:
        r.pop("wall_time_s")
    return rows


def test_rerun_overwrites_identically(tmp_path, data_dir):
    out = tmp_path / "run"
    argv = ["solve", "--cascade", str(data_dir / "cascade.json"),
            "--scenarios", str(data_dir / "pool3_manifest.json"),
            "--method", "cadmmb", "--rho0", "1.0", "--max-iter", "3",
            "--out", str(out)]
    run_cli(argv)
    first = _trace_without_timing(out / "trace.csv")
    run_cli(argv)
    assert _trace_without_timing(out / "trace.csv") == first
