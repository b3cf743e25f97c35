import csv
import json

import pytest

from rtopf import cli
from rtopf.grid import bundled_network_path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _feeder_dict():
    return json.loads(bundled_network_path("feeder15").read_text())


def _write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def _table_rows(out_dir):
    with open(out_dir / "table.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_bundled(capsys):
    code, out, _ = _run(capsys, "validate")
    assert code == 0
    assert "15 buses" in out


def test_validate_corrupted_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"buses": [\n  {"id": 0,}\n]}')
    code, _, err = _run(capsys, "validate", path)
    assert code == 1
    assert "line 2" in err


def test_validate_two_slacks(tmp_path, capsys):
    data = _feeder_dict()
    data["buses"][5]["kind"] = "slack"
    code, out, _ = _run(capsys, "validate", _write_json(tmp_path / "n.json", data))
    assert code == 1
    assert "multiple slack buses" in out


def test_opf_reports_binding(capsys, tmp_path):
    dump = tmp_path / "state.csv"
    code, out, _ = _run(capsys, "opf", "--wind", "4,4", "--dump-state", dump)
    assert code == 0
    result = json.loads(out)
    assert result["status"] == "optimal"
    assert min(result["beta"]) < 1
    assert "p_slack>=0" in result["binding"]
    assert result["p_slack_mw"] >= -1e-5
    assert dump.read_text().startswith("bus,e,f,vm")


def test_opf_wrong_station_count(capsys):
    code, _, err = _run(capsys, "opf", "--wind", "1")
    assert code == 1
    assert "expected 2 values" in err


def test_table_default(tmp_path, capsys):
    code, out, _ = _run(capsys, "table", "--forecast", "2,2.5", "--out", tmp_path)
    assert code == 0
    rows = _table_rows(tmp_path)
    assert len(rows) == 49
    assert [int(r["scenario_id"]) for r in rows] == list(range(49))
    summary = json.loads((tmp_path / "table.json").read_text())
    assert summary["rows"] == 49 and summary["fallback_rows"] == 0


def test_table_zero_delta(tmp_path, capsys):
    code, _, _ = _run(capsys, "table", "--forecast", "3,3", "--delta1", "0", "--out", tmp_path)
    assert code == 0
    rows = _table_rows(tmp_path)
    assert len(rows) == 49
    assert len({(r["beta_bus7"], r["beta_bus10"]) for r in rows}) == 1


def test_table_infeasible_variant(tmp_path, capsys):
    data = _feeder_dict()
    for br in data["branches"]:
        if br["from"] == 0:
            br["s_max_mva"] = 0.5  # below the feeder's reactive demand alone
    net = _write_json(tmp_path / "tight.json", data)
    code, out, _ = _run(capsys, "table", "--network", net, "--forecast", "2,2",
                        "--out", tmp_path / "o")
    assert code == 0
    rows = _table_rows(tmp_path / "o")
    assert len(rows) == 49
    assert {r["status"] for r in rows} == {"fallback"}
    assert {r["solver_status"] for r in rows} == {"infeasible"}
    assert {r["beta_bus7"] for r in rows} == {"0.0"}


def test_table_from_forecast_csv(tmp_path, capsys):
    f = tmp_path / "f.csv"
    f.write_text("horizon_index,ws_bus,p_forecast_mw\n2,3,1.5\n")
    net = bundled_network_path("feeder4")
    code, _, _ = _run(capsys, "table", "--network", net, "--forecast-csv", f, "--horizon", 2,
                      "--out", tmp_path / "o")
    assert code == 0
    assert len(_table_rows(tmp_path / "o")) == 7
    code, _, err = _run(capsys, "table", "--network", net, "--forecast-csv", f, "--horizon", 0)
    assert code == 1 and "no forecast for horizon 0" in err


def _simulate(capsys, out, *extra):
    code, _, err = _run(capsys, "simulate", "--network", bundled_network_path("feeder4"),
                        "--seed", 1, "--horizons", 3, "--out", out, *extra)
    assert code == 0, err
    return {p.name: p.read_bytes() for p in out.iterdir() if p.name != "run_report.json"}


def test_simulate_deterministic_across_runs_and_workers(tmp_path, capsys):
    a = _simulate(capsys, tmp_path / "a", "--workers", 1)
    b = _simulate(capsys, tmp_path / "b", "--workers", 8)
    c = _simulate(capsys, tmp_path / "c", "--workers", 1)
    assert a["dispatch_log.csv"] == b["dispatch_log.csv"]
    for name in ("dispatch_log.csv", "audit.csv", "levels.csv", "sim_report.json"):
        assert a[name] == c[name]


def test_simulate_zero_wind(tmp_path, capsys):
    f = tmp_path / "f.csv"
    f.write_text("horizon_index,ws_bus,p_forecast_mw\n0,3,0\n")
    a = tmp_path / "a.csv"
    a.write_text("interval_index,ws_bus,p_actual_mw\n" + "".join(f"{t},3,0\n" for t in range(6)))
    _simulate(capsys, tmp_path / "o", "--forecast-csv", f, "--actual-csv", a)
    report = json.loads((tmp_path / "o" / "sim_report.json").read_text())
    assert report["economics"]["wind_revenue"] == 0.0
    code, out, _ = _run(capsys, "report", tmp_path / "o" / "sim_report.json")
    assert code == 0 and "net benefit" in out


def test_flags_override_config(tmp_path, capsys):
    cfg = _write_json(tmp_path / "cfg.json", {
        "network": str(bundled_network_path("feeder4")), "seed": 5, "horizons": 1,
        "prices": {"price_wind": 90.0}, "timing": {"wall_clock_scale": 0.5},
    })
    out = tmp_path / "o"
    code, _, err = _run(capsys, "simulate", "--config", cfg, "--seed", 2, "--out", out)
    assert code == 0, err
    used = json.loads((out / "config.json").read_text())
    assert used["seed"] == 2 and used["horizons"] == 1
    assert used["prices"] == {"price_wind": 90.0}
    report = json.loads((out / "sim_report.json").read_text())
    assert report["prices"]["price_wind"] == 90.0
    assert report["timing"]["wall_clock_scale"] == 0.5


@pytest.mark.parametrize("config, fragment", [
    ({"bogus": 1}, "unknown config keys"),
    ({"network": "/nonexistent.json"}, "file not found"),
    ({"horizons": 0}, "horizons"),
    ({"prices": {"price_wind": -1}}, "price_wind"),
    ({"timing": {"t_data": 50}}, "t_solve"),
    ({"delta1_mw": [2.0]}, "exceeds p_rated"),
])
def test_bad_config_exit_1(tmp_path, capsys, config, fragment):
    cfg = _write_json(tmp_path / "cfg.json", config)
    code, _, err = _run(capsys, "simulate", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1
    assert fragment in err


def test_usage_error_exit_1(capsys):
    code, _, _ = _run(capsys, "opf", "--wind", "a,b")
    assert code == 1


def test_report_rejects_other_json(tmp_path, capsys):
    code, _, err = _run(capsys, "report", _write_json(tmp_path / "x.json", {"a": 1}))
    assert code == 1 and "not a simulation report" in err


def test_internal_error_exit_2(monkeypatch, capsys):
    def broken(args):
        raise RuntimeError("invariant breached")

    monkeypatch.setitem(cli.COMMANDS, "validate", broken)
    code, _, err = _run(capsys, "validate")
    assert code == 2
    assert "please report it" in err
