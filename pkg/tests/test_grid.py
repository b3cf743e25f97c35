import dataclasses
import json

import numpy as np
import pytest

from conftest import two_bus
from rtopf.grid import (
    Branch,
    Bus,
    Network,
    NetworkFileError,
    NetworkValidationError,
    build_admittance,
    bundled_network_path,
    load_network,
    mw_to_pu,
    network_from_dict,
    network_to_dict,
    pu_to_mw,
    validate_network,
)


def _feeder_dict():
    return json.loads(bundled_network_path("feeder15").read_text())


def _write(tmp_path, data):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(data))
    return path


def test_feeder15_shape(feeder15):
    assert feeder15.n_bus == 15
    assert len(feeder15.branches) == 14
    assert feeder15.n_ws == 2
    assert validate_network(feeder15) == []


@pytest.mark.parametrize("name", ["feeder15", "feeder4"])
def test_bundled_feeders_are_valid(name):
    net = load_network(bundled_network_path(name))
    assert validate_network(net) == []


def test_two_slack_buses_rejected(tmp_path):
    data = _feeder_dict()
    data["buses"][3]["kind"] = "slack"
    with pytest.raises(NetworkValidationError) as err:
        load_network(_write(tmp_path, data))
    assert any("multiple slack buses" in v for v in err.value.violations)


def test_dangling_branch_endpoint(tmp_path):
    data = _feeder_dict()
    data["branches"][4]["to"] = 99
    with pytest.raises(NetworkValidationError) as err:
        load_network(_write(tmp_path, data))
    assert any("dangling branch endpoint" in v for v in err.value.violations)


def test_negative_resistance_single_violation(feeder15):
    branches = list(feeder15.branches)
    branches[2] = dataclasses.replace(branches[2], r=-0.01)
    violations = validate_network(feeder15.with_branches(branches))
    assert len(violations) == 1
    assert "negative resistance" in violations[0]


def test_disconnected_bus_single_violation(feeder15):
    # drop the branch feeding leaf bus 14
    branches = [b for b in feeder15.branches if (b.from_bus, b.to_bus) != (13, 14)]
    violations = validate_network(feeder15.with_branches(branches))
    assert violations == ["bus 14: unreachable from slack"]


def test_every_violation_listed():
    net = Network(base_mva=10.0,
                  buses=[Bus(0, "pq"), Bus(1, "pq"), Bus(2, "pq")],
                  branches=[Branch(0, 1, -0.1, 0.0)])
    violations = validate_network(net)
    joined = "\n".join(violations)
    for text in ("no slack bus", "negative resistance", "zero reactance", "unreachable from slack"):
        assert text in joined


@pytest.mark.parametrize("text, fragment", [
    ("{", "line 1"),
    ('{"base_mva": 10, "buses": [{"id": 0}]}', "missing field 'kind'"),
    ('{"buses": [{"id": 0, "kind": "slack", "p_demand_mw": "x"}]}', "must be a number"),
    ("[]", "expected a JSON object"),
])
def test_corrupted_file_diagnostics(tmp_path, text, fragment):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(NetworkFileError, match=fragment):
        load_network(path)


def test_missing_file(tmp_path):
    with pytest.raises(NetworkFileError):
        load_network(tmp_path / "nope.json")


def test_single_branch_admittance():
    y = build_admittance(two_bus(r=0.01, x=0.02)).y
    # 1 / (0.01 + 0.02j) = 20 - 40j
    assert y[0, 1] == pytest.approx(-(20 - 40j), abs=1e-12)
    assert y[1, 0] == pytest.approx(-(20 - 40j), abs=1e-12)
    assert y[0, 0] == pytest.approx(20 - 40j, abs=1e-12)


def test_shunt_goes_to_diagonal():
    y = build_admittance(two_bus(r=0.01, x=0.02, b_shunt=0.004)).y
    assert y[1, 1] == pytest.approx(20 - 40j + 0.002j, abs=1e-12)
    assert y[0, 1] == pytest.approx(-(20 - 40j), abs=1e-12)


def test_no_branches_gives_zero_matrix():
    net = Network(base_mva=1.0, buses=[Bus(0, "slack"), Bus(1, "pq")])
    assert np.array_equal(build_admittance(net).y, np.zeros((2, 2)))


def test_zero_impedance_branch_raises():
    with pytest.raises(ValueError, match="singular branch"):
        build_admittance(two_bus(r=0.0, x=0.0))


def test_feeder15_sparsity_matches_branches(feeder15, y15):
    expected = np.eye(feeder15.n_bus, dtype=bool)
    for br in feeder15.branches:
        expected[br.from_bus, br.to_bus] = expected[br.to_bus, br.from_bus] = True
    assert np.array_equal(y15.y != 0, expected)


@pytest.mark.parametrize("name", ["feeder15", "feeder4"])
def test_row_sum_identity(name):
    net = load_network(bundled_network_path(name))
    y = build_admittance(net).y
    for k in range(net.n_bus):
        off = y[k].sum() - y[k, k]
        incident = sum(1 / complex(b.r, b.x) for b in net.branches if k in (b.from_bus, b.to_bus))
        assert abs(off + incident) <= 1e-12


def test_admittance_is_read_only(y15):
    with pytest.raises(ValueError):
        y15.y[0, 0] = 0


@pytest.mark.parametrize("mw", [0.0, 1e-9, 0.35, 4.0, 123.456])
@pytest.mark.parametrize("base", [1.0, 10.0, 100.0])
def test_per_unit_round_trip(mw, base):
    assert pu_to_mw(mw_to_pu(mw, base), base) == pytest.approx(mw, rel=1e-12, abs=0)


def test_dict_round_trip(feeder15):
    again = network_from_dict(network_to_dict(feeder15))
    assert again == feeder15


def test_with_demand_replaces_only_demand(feeder15):
    p = feeder15.p_demand * 2
    q = feeder15.q_demand * 0
    net = feeder15.with_demand(p, q)
    assert np.array_equal(net.p_demand, p)
    assert np.array_equal(net.q_demand, q)
    assert net.branches == feeder15.branches
