import sys

import pytest

from rtopf.grid import Branch, Bus, Network, WindStation, build_admittance, load_bundled


@pytest.fixture(scope="session")
def feeder15():
    return load_bundled("feeder15")


@pytest.fixture(scope="session")
def y15(feeder15):
    return build_admittance(feeder15)


@pytest.fixture(scope="session")
def feeder4():
    return load_bundled("feeder4")


def two_bus(r=0.01, x=0.02, p=0.1, q=0.05, b_shunt=0.0, s_max=float("inf"), p_rated=None):
    """Slack bus 0 feeding one load bus over a single branch (p.u.)."""
    buses = [Bus(0, "slack"), Bus(1, "pq", p_demand=p, q_demand=q)]
    stations = [WindStation(1, p_rated)] if p_rated is not None else []
    return Network(base_mva=10.0, buses=buses,
                   branches=[Branch(0, 1, r, x, b_shunt=b_shunt, s_max=s_max)],
                   wind_stations=stations)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
