"""Moving-horizon simulation of the prediction/update cycle.

Horizon ``k`` is dispatched from a table built during horizon ``k - 1`` out of
the forecast for ``k``; horizon 0's table is built in a warm-up phase before
the clock starts. Within a cycle the solve lane (next table) runs in a
background thread while the dispatch lane reads the current table; the new
table is handed over only when the cycle ends.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rtopf.dispatch import (
    DISPATCH_LOG_COLUMNS,
    DispatchDecision,
    LookupTable,
    build_table,
    dispatch_interval,
    dispatch_log_rows,
)
from rtopf.grid import AdmittanceMatrix, Network, build_admittance, mw_to_pu, pu_to_mw
from rtopf.opf import OpfProblem, PriceModel, solve_opf
from rtopf.powerflow import branch_flows, branch_losses, make_injections, solve_powerflow
from rtopf.scenario import LEVEL_NAMES, LEVEL_TAGS, DeviationConfig, build_levels, enumerate_scenarios
from rtopf.scheduler import SolveReport, TimingConfig, solve_all
from rtopf.util import atomic_write_text, write_csv

log = logging.getLogger(__name__)

DEFAULT_VOLATILITY = 0.02
BALANCE_TOL = 1e-8
REVERSE_FLOW_TOL = 1e-6


@dataclass(frozen=True)
class WindTrace:
    """Actual wind per update interval and forecast per horizon (p.u.).

    ``actual`` has shape (n_ws, horizons * n_updates); ``forecast`` has shape
    (n_ws, horizons).
    """

    actual: np.ndarray
    forecast: np.ndarray
    n_updates: int = 6

    def __post_init__(self):
        actual = np.array(self.actual, dtype=float, ndmin=2)
        forecast = np.array(self.forecast, dtype=float, ndmin=2)
        if actual.shape[1] != forecast.shape[1] * self.n_updates:
            raise ValueError(
                f"trace length {actual.shape[1]} != horizons {forecast.shape[1]} "
                f"x {self.n_updates} updates"
            )
        actual.flags.writeable = False
        forecast.flags.writeable = False
        object.__setattr__(self, "actual", actual)
        object.__setattr__(self, "forecast", forecast)

    @property
    def horizons(self) -> int:
        return self.forecast.shape[1]

    def horizon_actuals(self, k: int) -> np.ndarray:
        return self.actual[:, k * self.n_updates:(k + 1) * self.n_updates]

    def check(self, net: Network) -> None:
        rated = net.p_rated[:, None]
        if self.actual.shape[0] != net.n_ws:
            raise ValueError(f"trace has {self.actual.shape[0]} stations, network {net.n_ws}")
        for name, arr in (("actual", self.actual), ("forecast", self.forecast)):
            if np.any(arr < 0) or np.any(arr > rated):
                raise ValueError(f"{name} wind outside [0, p_rated]")


def synthesize_trace(seed: int, net: Network, horizons: int,
                     volatility: float = DEFAULT_VOLATILITY, n_updates: int = 6,
                     initial=None) -> WindTrace:
    """Seeded bounded random walk of actual wind with noisy per-horizon forecasts.

    Each step moves by at most ``volatility`` p.u.; each forecast is the mean
    of its horizon's actuals plus a uniform error of at most ``volatility``.
    """
    if volatility < 0:
        raise ValueError("volatility must be non-negative")
    rng = np.random.default_rng(seed)
    rated = net.p_rated
    n_ws = net.n_ws
    steps = horizons * n_updates
    if initial is None:
        initial = rng.uniform(0.5, 0.9, n_ws) * rated
    level = np.clip(np.asarray(initial, dtype=float), 0.0, rated)
    actual = np.empty((n_ws, steps))
    moves = rng.uniform(-volatility, volatility, (n_ws, steps))
    for t in range(steps):
        if t:
            level = np.clip(level + moves[:, t], 0.0, rated)
        actual[:, t] = level
    errors = rng.uniform(-volatility, volatility, (n_ws, horizons))
    blocks = actual.reshape(n_ws, horizons, n_updates)
    # offset form keeps a constant horizon's mean bit-exact
    means = blocks[:, :, 0] + (blocks - blocks[:, :, :1]).mean(axis=2)
    forecast = np.clip(means + errors, 0.0, rated[:, None])
    return WindTrace(actual=actual, forecast=forecast, n_updates=n_updates)


def read_trace_csv(actual_path, forecast_path, net: Network, n_updates: int = 6) -> WindTrace:
    """Load a trace from ``interval_index, ws_bus, p_actual_mw`` and forecast CSVs."""
    from rtopf.scenario import read_forecast_csv

    forecasts = read_forecast_csv(forecast_path, net)
    horizons = len(forecasts)
    if sorted(forecasts) != list(range(horizons)):
        raise ValueError(f"{forecast_path}: horizons must be 0..{horizons - 1}")
    actual = np.full((net.n_ws, horizons * n_updates), np.nan)
    col = {w.bus: i for i, w in enumerate(net.wind_stations)}
    with open(actual_path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                t = int(row["interval_index"])
                i = col[int(row["ws_bus"])]
                actual[i, t] = mw_to_pu(float(row["p_actual_mw"]), net.base_mva)
            except (KeyError, ValueError, IndexError) as exc:
                raise ValueError(f"{actual_path}: line {lineno}: bad row ({exc})") from None
    if np.isnan(actual).any():
        raise ValueError(f"{actual_path}: trace does not cover every interval and station")
    forecast = np.array([forecasts[h] for h in range(horizons)]).T
    return WindTrace(actual=actual, forecast=forecast, n_updates=n_updates)


def read_demand_csv(path, net: Network) -> dict[int, Network]:
    """Per-horizon demand overrides: ``horizon_index, bus, p_demand_mw, q_demand_mvar``."""
    overrides: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                h = int(row["horizon_index"])
                bus = int(row["bus"])
                p = mw_to_pu(float(row["p_demand_mw"]), net.base_mva)
                q = mw_to_pu(float(row["q_demand_mvar"]), net.base_mva)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad row ({exc})") from None
            if not 0 < bus < net.n_bus:
                raise ValueError(f"{path}: line {lineno}: bus {bus} is not a pq bus")
            pd_, qd_ = overrides.setdefault(h, (net.p_demand.copy(), net.q_demand.copy()))
            pd_[bus], qd_[bus] = p, q
    return {h: net.with_demand(p, q) for h, (p, q) in overrides.items()}


@dataclass(frozen=True)
class AuditRow:
    horizon: int
    interval: int
    converged: bool
    p_slack: float
    q_slack: float
    loss: float
    balance_residual: float
    v_min_violation: float
    v_max_violation: float
    branch_violation: float
    reverse_p_violation: float
    reverse_q_violation: float
    available: float
    injected: float
    beta_ideal: tuple[float, ...]
    injected_ideal: float
    conservatism: float
    clamped: int


@dataclass
class CycleResult:
    decisions: list[DispatchDecision]
    audits: list[AuditRow]
    next_table: LookupTable | None
    solve_report: SolveReport | None


@dataclass
class SimReport:
    base_mva: float
    timing: TimingConfig
    prices: PriceModel
    decisions: list[DispatchDecision] = field(default_factory=list)
    audits: list[AuditRow] = field(default_factory=list)
    tables: list[LookupTable] = field(default_factory=list)
    solve_reports: list[SolveReport] = field(default_factory=list)

    @property
    def clamp_events(self) -> int:
        return sum(sum(d.clamped) for d in self.decisions)

    @property
    def overruns(self) -> int:
        return sum(r.overruns for r in self.solve_reports)

    @property
    def reverse_flow_violations(self) -> int:
        return sum(1 for a in self.audits
                   if a.reverse_p_violation > REVERSE_FLOW_TOL or a.reverse_q_violation > REVERSE_FLOW_TOL)

    def energy(self) -> dict[str, float]:
        """Energy totals in MWh (reactive import in MVArh)."""
        to_mwh = self.base_mva * self.timing.t_update / 3600.0
        available = sum(a.available for a in self.audits) * to_mwh
        injected = sum(a.injected for a in self.audits) * to_mwh
        by_conservatism = sum(a.conservatism for a in self.audits) * to_mwh
        curtailed = sum(a.available - a.injected for a in self.audits) * to_mwh
        return {
            "available_mwh": available,
            "injected_mwh": injected,
            "curtailed_mwh": curtailed,
            "curtailed_by_beta_mwh": curtailed - by_conservatism,
            "curtailed_by_conservatism_mwh": by_conservatism,
            "imported_p_mwh": sum(a.p_slack for a in self.audits) * to_mwh,
            "imported_q_mvarh": sum(a.q_slack for a in self.audits) * to_mwh,
            "losses_mwh": sum(a.loss for a in self.audits) * to_mwh,
        }

    def economics(self) -> dict[str, float]:
        e = self.energy()
        p = self.prices
        revenue = p.price_wind * e["injected_mwh"]
        loss_cost = p.price_loss * e["losses_mwh"]
        p_cost = p.price_p_import * e["imported_p_mwh"]
        q_cost = p.price_q_import * e["imported_q_mvarh"]
        return {
            "wind_revenue": revenue,
            "loss_cost": loss_cost,
            "p_import_cost": p_cost,
            "q_import_cost": q_cost,
            "net_benefit": revenue - loss_cost - p_cost - q_cost,
        }

    def to_dict(self) -> dict:
        """Deterministic summary (no wall-clock data)."""
        return {
            "horizons": len(self.tables),
            "intervals": len(self.decisions),
            "timing": asdict(self.timing) | {"t_solve": self.timing.t_solve},
            "prices": asdict(self.prices),
            "energy": self.energy(),
            "economics": self.economics(),
            "clamp_events": self.clamp_events,
            "scheduler_overruns": self.overruns,
            "fallback_rows": [t.n_fallback for t in self.tables],
            "reverse_flow_violations": self.reverse_flow_violations,
            "max_balance_residual_pu": max((abs(a.balance_residual) for a in self.audits), default=0.0),
            "max_violation_pu": {
                "v_min": max((a.v_min_violation for a in self.audits), default=0.0),
                "v_max": max((a.v_max_violation for a in self.audits), default=0.0),
                "branch": max((a.branch_violation for a in self.audits), default=0.0),
                "reverse_p": max((a.reverse_p_violation for a in self.audits), default=0.0),
                "reverse_q": max((a.reverse_q_violation for a in self.audits), default=0.0),
            },
            "tables": [
                {"horizon": t.horizon_index, "created_at_s": t.created_at,
                 "rows": len(t), "fallback_rows": t.n_fallback}
                for t in self.tables
            ],
        }


def build_horizon_table(net: Network, y: AdmittanceMatrix, prices: PriceModel,
                        timing: TimingConfig, dev: DeviationConfig, forecast,
                        horizon_index: int, workers: int | None = None, solver=solve_opf):
    """Build one horizon's table: levels, scenarios, parallel solves."""
    levels = build_levels(net, forecast, dev)
    scenarios = enumerate_scenarios(levels)
    problems = {sc.id: OpfProblem(net=net, y=y, wind_available=sc.wind, prices=prices)
                for sc in scenarios}
    solutions, report = solve_all(problems, timing, workers=workers, solver=solver)
    # published in the last data step before the horizon starts
    created_at = horizon_index * timing.t_horizon - timing.t_data
    table = build_table(scenarios, solutions, horizon_index=horizon_index, created_at=created_at)
    return table, report


def audit_interval(net: Network, y: AdmittanceMatrix, prices: PriceModel,
                   decision: DispatchDecision) -> AuditRow:
    """Re-run the power flow at the realised injections and measure limits.

    Also solves the OPF at the measured wind to quantify what the
    nearest-higher rule gave up.
    """
    state = solve_powerflow(net, y, make_injections(net, decision.injected))
    available = float(sum(decision.actual_wind))
    injected = float(sum(decision.injected))
    ideal = solve_opf(OpfProblem(net=net, y=y, wind_available=decision.actual_wind, prices=prices))
    injected_ideal = float(sum(b * a for b, a in zip(ideal.beta, decision.actual_wind)))
    base = dict(
        horizon=decision.horizon_index, interval=decision.interval_index,
        available=available, injected=injected, beta_ideal=ideal.beta,
        injected_ideal=injected_ideal, conservatism=injected_ideal - injected,
        clamped=int(sum(decision.clamped)),
    )
    if not state.converged:
        log.error("audit power flow failed at horizon %d interval %d",
                  decision.horizon_index, decision.interval_index)
        nan = float("nan")
        return AuditRow(converged=False, p_slack=nan, q_slack=nan, loss=nan,
                        balance_residual=nan, v_min_violation=np.inf, v_max_violation=np.inf,
                        branch_violation=np.inf, reverse_p_violation=np.inf,
                        reverse_q_violation=np.inf, **base)
    vm = state.vm
    loss = float(np.sum(branch_losses(net, state)))
    residual = state.p_slack + injected - float(np.sum(net.p_demand[1:])) - loss
    flows = branch_flows(net, state)
    s_max = net.branch_arrays["s_max"]
    return AuditRow(
        converged=True, p_slack=state.p_slack, q_slack=state.q_slack, loss=loss,
        balance_residual=residual,
        v_min_violation=float(np.max(np.maximum(net.v_min - vm, 0.0))),
        v_max_violation=float(np.max(np.maximum(vm - net.v_max, 0.0))),
        branch_violation=float(np.max(np.maximum(flows - s_max, 0.0), initial=0.0)),
        reverse_p_violation=max(0.0, -state.p_slack),
        reverse_q_violation=max(0.0, -state.q_slack),
        **base,
    )


def run_cycle(net: Network, y: AdmittanceMatrix, prices: PriceModel, timing: TimingConfig,
              dev: DeviationConfig, table: LookupTable, actuals, forecast_next=None,
              net_next: Network | None = None, workers: int | None = None,
              solver=solve_opf) -> CycleResult:
    """One prediction horizon: dispatch ``table`` while building the next one."""
    k = table.horizon_index
    actuals = np.asarray(actuals, dtype=float)
    if actuals.shape[1] != timing.n_updates:
        raise ValueError(f"expected {timing.n_updates} intervals, got {actuals.shape[1]}")

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="solve-lane") as lane:
        pending = None
        if forecast_next is not None:
            pending = lane.submit(build_horizon_table, net if net_next is None else net_next,
                                  y, prices, timing, dev, forecast_next, k + 1, workers, solver)

        decisions, audits = [], []
        for j in range(timing.n_updates):
            d = dispatch_interval(table, actuals[:, j], interval_index=j)
            decisions.append(d)
            audits.append(audit_interval(net, y, prices, d))

        next_table, report = pending.result() if pending is not None else (None, None)
    return CycleResult(decisions=decisions, audits=audits, next_table=next_table,
                       solve_report=report)


def run_simulation(net: Network, prices: PriceModel, timing: TimingConfig, trace: WindTrace,
                   dev: DeviationConfig | None = None, workers: int | None = None,
                   demand: dict[int, Network] | None = None, solver=solve_opf) -> SimReport:
    """Run every horizon of ``trace``; ``demand`` optionally overrides per horizon."""
    if trace.horizons < 1:
        raise ValueError("trace must cover at least one horizon")
    if trace.n_updates != timing.n_updates:
        raise ValueError("trace and timing disagree on updates per horizon")
    trace.check(net)
    dev = DeviationConfig.default(net) if dev is None else dev
    dev.check(net)
    demand = demand or {}
    y = build_admittance(net)
    report = SimReport(base_mva=net.base_mva, timing=timing, prices=prices)

    def net_for(k):
        return demand.get(k, net)

    table, solve_report = build_horizon_table(net_for(0), y, prices, timing, dev,
                                              trace.forecast[:, 0], 0, workers, solver)
    report.tables.append(table)
    report.solve_reports.append(solve_report)
    for k in range(trace.horizons):
        has_next = k + 1 < trace.horizons
        result = run_cycle(
            net_for(k), y, prices, timing, dev, table, trace.horizon_actuals(k),
            forecast_next=trace.forecast[:, k + 1] if has_next else None,
            net_next=net_for(k + 1) if has_next else None,
            workers=workers, solver=solver,
        )
        report.decisions.extend(result.decisions)
        report.audits.extend(result.audits)
        if result.next_table is not None:
            table = result.next_table
            report.tables.append(table)
            report.solve_reports.append(result.solve_report)
    return report


AUDIT_COLUMNS = ["horizon", "interval", "converged", "p_slack_mw", "q_slack_mvar", "loss_mw",
                 "balance_residual_pu", "v_min_violation_pu", "v_max_violation_pu",
                 "branch_violation_pu", "reverse_p_violation_pu", "reverse_q_violation_pu",
                 "available_mw", "injected_mw", "injected_ideal_mw", "conservatism_mw",
                 "clamped_count"]


def write_outputs(report: SimReport, net: Network, out_dir) -> list[Path]:
    """Write dispatch log, audit, summary JSON, plot-ready levels and run timing."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = net.base_mva
    levels_by_h = {t.horizon_index: t.levels for t in report.tables}

    paths = [out / "dispatch_log.csv", out / "audit.csv", out / "levels.csv",
             out / "sim_report.json", out / "run_report.json"]
    write_csv(paths[0], DISPATCH_LOG_COLUMNS,
              dispatch_log_rows(report.decisions, levels_by_h, base))

    def mw(x):
        return repr(pu_to_mw(x, base))

    write_csv(paths[1], AUDIT_COLUMNS, (
        [a.horizon, a.interval, int(a.converged), mw(a.p_slack), mw(a.q_slack), mw(a.loss),
         repr(a.balance_residual), repr(a.v_min_violation), repr(a.v_max_violation),
         repr(a.branch_violation), repr(a.reverse_p_violation), repr(a.reverse_q_violation),
         mw(a.available), mw(a.injected), mw(a.injected_ideal), mw(a.conservatism), a.clamped]
        for a in report.audits
    ))

    level_cols = [f"{LEVEL_NAMES[t]}_mw" for t in LEVEL_TAGS]
    write_csv(paths[2], ["time_s", "horizon", "interval", "ws_bus", "forecast_mw", *level_cols,
                         "actual_mw", "injected_mw"], (
        [repr(d.horizon_index * report.timing.t_horizon + d.interval_index * report.timing.t_update),
         d.horizon_index, d.interval_index, ls.bus, mw(ls.forecast),
         *(mw(v) for v in ls.values), mw(a), mw(inj)]
        for d in report.decisions
        for ls, a, inj in zip(levels_by_h[d.horizon_index], d.actual_wind, d.injected)
    ))

    atomic_write_text(paths[3], json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(paths[4], json.dumps(
        {"solve_reports": [r.to_dict() for r in report.solve_reports]},
        indent=2, sort_keys=True) + "\n")
    return paths
