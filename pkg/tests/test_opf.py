import dataclasses

import numpy as np
import pytest

from conftest import two_bus
from rtopf.grid import Bus, Network, build_admittance
from rtopf.opf import (
    FALLBACK,
    INFEASIBLE,
    OPTIMAL,
    DeadlineExceeded,
    OpfProblem,
    PriceModel,
    binding_constraints,
    constraint_labels,
    evaluate,
    oracle_solve,
    solve_opf,
)
from rtopf.powerflow import make_injections, solve_powerflow, total_losses


def _problem(net, y, wind, prices=None):
    return OpfProblem(net=net, y=y, wind_available=wind, prices=prices or PriceModel())


def _assert_matches_oracle(problem, rel=1e-3):
    sol = solve_opf(problem)
    ref = oracle_solve(problem)
    scale = max(1.0, abs(ref.objective))
    assert sol.objective >= ref.objective - rel * scale
    return sol, ref


def test_zero_wind_objective_independent_of_beta(feeder15, y15):
    problem = _problem(feeder15, y15, (0.0, 0.0))
    state = solve_powerflow(feeder15, y15, make_injections(feeder15))
    p = problem.prices
    expected = feeder15.base_mva * -(p.price_loss * total_losses(feeder15, state)
                                     + p.price_p_import * state.p_slack
                                     + p.price_q_import * state.q_slack)
    for beta in [(0, 0), (1, 1), (0.3, 0.8)]:
        assert evaluate(problem, beta).objective == pytest.approx(expected, rel=1e-12)
    sol = solve_opf(problem)
    assert sol.beta == (0.0, 0.0)
    assert sol.status == OPTIMAL


def test_flat_zero_feeder():
    net = Network(base_mva=1.0, buses=[Bus(0, "slack"), Bus(1, "pq")],
                  branches=two_bus().branches, wind_stations=two_bus(p_rated=0.5).wind_stations)
    ev = evaluate(_problem(net, build_admittance(net), (0.0,)), (0.7,))
    assert ev.objective == 0.0
    assert ev.feasible
    assert ev.violations[:-1].max() == 0.0


def test_two_bus_wind_equals_demand():
    net = two_bus(p=0.1, q=0.0, p_rated=0.2)
    problem = _problem(net, build_admittance(net), (0.1,))
    ev = evaluate(problem, (1.0,))
    loss = total_losses(net, ev.state)
    # only the branch loss is imported
    assert ev.state.p_slack == pytest.approx(loss, abs=1e-12)
    p = problem.prices
    revenue = net.base_mva * p.price_wind * 0.1
    rest = net.base_mva * (p.price_loss * loss + p.price_p_import * ev.state.p_slack
                           + p.price_q_import * ev.state.q_slack)
    assert ev.objective == pytest.approx(revenue - rest, rel=1e-12)


def test_constraint_vector_layout(feeder15, y15):
    ev = evaluate(_problem(feeder15, y15, (0.1, 0.1)), (0.5, 0.5))
    labels = constraint_labels(feeder15)
    assert len(labels) == ev.constraints.size == 2 * 15 + 14 + 3
    assert labels[-1] == "non_physical" and ev.constraints[-1] == -np.inf


@pytest.mark.parametrize("beta", [(-0.1, 0.5), (0.5, 1.2), (np.nan, 0.0), (0.5,)])
def test_evaluate_rejects_bad_beta(feeder15, y15, beta):
    with pytest.raises(ValueError):
        evaluate(_problem(feeder15, y15, (0.1, 0.1)), beta)


def test_wind_above_rating_rejected(feeder15, y15):
    with pytest.raises(ValueError, match="must lie in"):
        _problem(feeder15, y15, (0.5, 0.1))


def test_low_wind_full_injection(feeder15, y15):
    sol, ref = _assert_matches_oracle(_problem(feeder15, y15, (0.1, 0.12)))
    assert sol.beta == pytest.approx((1.0, 1.0), abs=1e-6)
    assert ref.beta == (1.0, 1.0)


def test_binding_instance_curtails(feeder15, y15):
    problem = _problem(feeder15, y15, (0.4, 0.4))
    sol, ref = _assert_matches_oracle(problem)
    assert min(sol.beta) < 1.0
    assert sol.state.p_slack >= -1e-6 and sol.state.q_slack >= -1e-6
    assert "p_slack>=0" in binding_constraints(problem, sol)


@pytest.mark.parametrize("seed", range(5))
def test_random_instances_against_oracle(feeder15, y15, seed):
    rng = np.random.default_rng(100 + seed)
    prices = PriceModel(*rng.uniform([20, 5, 20, 0], [150, 100, 120, 40]))
    problem = _problem(feeder15, y15, tuple(rng.uniform(0, 0.4, 2)), prices)
    sol, _ = _assert_matches_oracle(problem)
    again = evaluate(problem, sol.beta)
    assert again.feasible and again.max_violation <= 1e-6


def test_single_station_feeder(feeder4):
    y = build_admittance(feeder4)
    for wind in (0.05, 0.2, 0.3):
        sol, _ = _assert_matches_oracle(_problem(feeder4, y, (wind,)))
        assert sol.state.p_slack >= -1e-6


def test_oracle_grid_counts(feeder15, y15, feeder4):
    one = oracle_solve(_problem(feeder4, build_admittance(feeder4), (0.1,)), resolution=0.5)
    assert one.evaluations == 3
    two = oracle_solve(_problem(feeder15, y15, (0.1, 0.1)), resolution=0.02)
    assert two.evaluations == 51**2


def test_oracle_refuses_huge_grid(feeder15, y15):
    with pytest.raises(ValueError, match="grid too large"):
        oracle_solve(_problem(feeder15, y15, (0.1, 0.1)), resolution=1e-4)


def test_optimum_non_decreasing_in_wind(feeder15, y15):
    winds = [(0.05, 0.05), (0.1, 0.1), (0.2, 0.15), (0.3, 0.3), (0.35, 0.4), (0.4, 0.4)]
    objectives = [solve_opf(_problem(feeder15, y15, w)).objective for w in winds]
    for lo, hi in zip(objectives, objectives[1:]):
        assert hi >= lo - 1e-9 * abs(lo)
    # the optimum at lower wind stays reachable at higher wind: oracle is a lower bound
    coarse = [oracle_solve(_problem(feeder15, y15, w), resolution=0.1).objective for w in winds]
    for k in range(1, len(winds)):
        assert objectives[k] >= coarse[k - 1] - 1e-9


def test_zero_wind_price_never_overinjects(feeder15, y15):
    problem = _problem(feeder15, y15, (0.4, 0.4), PriceModel(price_wind=0.0))
    ref = oracle_solve(problem, resolution=0.05)
    injected = sum(b * w for b, w in zip(ref.beta, problem.wind_available))
    loss = total_losses(feeder15, ref.state)
    assert injected <= feeder15.p_demand.sum() + loss + 1e-12


def test_solve_is_deterministic(feeder15, y15):
    problem = _problem(feeder15, y15, (0.33, 0.27))
    a, b = solve_opf(problem), solve_opf(problem)
    assert a.beta == b.beta and a.objective == b.objective


def test_infeasible_variant_reports_infeasible(feeder15):
    # root branch limit below the reactive demand: no beta helps
    branches = [dataclasses.replace(b, s_max=0.05) if b.from_bus == 0 else b
                for b in feeder15.branches]
    net = feeder15.with_branches(branches)
    sol = solve_opf(_problem(net, build_admittance(net), (0.2, 0.2)))
    assert sol.status == INFEASIBLE
    assert sol.beta == (0.0, 0.0)


def test_expired_deadline_raises(feeder15, y15):
    class Expired:
        def expired(self):
            return True

    with pytest.raises(DeadlineExceeded):
        solve_opf(_problem(feeder15, y15, (0.2, 0.2)), deadline=Expired())


def test_price_model_validation():
    with pytest.raises(ValueError):
        PriceModel(price_loss=-1.0)


def test_fallback_solution():
    from rtopf.opf import OpfSolution

    fb = OpfSolution.fallback(2)
    assert fb.beta == (0.0, 0.0) and fb.status == FALLBACK and fb.state is None


@pytest.mark.parametrize("name", ["feeder15", "feeder4"])
def test_fallback_is_feasible_on_bundled_feeders(name):
    from rtopf.grid import load_bundled

    net = load_bundled(name)
    problem = _problem(net, build_admittance(net), tuple(net.p_rated))
    assert evaluate(problem, (0.0,) * net.n_ws).feasible
