"""Lookup table assembly and per-interval dispatch of curtailment factors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

from rtopf.opf import FALLBACK, INFEASIBLE, OpfSolution
from rtopf.scenario import LEVEL_NAMES, LEVEL_TAGS, LevelSet, Scenario, ScenarioSet, encode_tags

log = logging.getLogger(__name__)


class LookupTableError(ValueError):
    pass


@dataclass(frozen=True)
class TableRow:
    scenario: Scenario
    solution: OpfSolution
    audit: str  # status reported by the solver before any fallback substitution

    @property
    def beta(self) -> tuple[float, ...]:
        return self.solution.beta


@dataclass(frozen=True)
class LookupTable:
    horizon_index: int
    scenarios: ScenarioSet
    rows: Mapping[int, TableRow]
    created_at: float = 0.0

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, scenario_id: int) -> TableRow:
        return self.rows[scenario_id]

    @property
    def levels(self) -> tuple[LevelSet, ...]:
        return self.scenarios.levels

    @property
    def n_fallback(self) -> int:
        return sum(1 for r in self.rows.values() if r.solution.status == FALLBACK)


@dataclass(frozen=True)
class DispatchDecision:
    horizon_index: int
    interval_index: int
    actual_wind: tuple[float, ...]
    selected_scenario: int
    selected_tags: tuple[int, ...]
    selected_levels: tuple[float, ...]
    beta_applied: tuple[float, ...]
    injected: tuple[float, ...]
    clamped: tuple[bool, ...]

    @property
    def planned(self) -> tuple[float, ...]:
        """Injection the table row was planned for (beta times level value)."""
        return tuple(b * v for b, v in zip(self.beta_applied, self.selected_levels))


def build_table(scenarios: ScenarioSet, solutions: Mapping[int, OpfSolution],
                horizon_index: int = 0, created_at: float = 0.0) -> LookupTable:
    """Pair every scenario with its solution; infeasible rows fall back to beta = 0."""
    missing = [s.id for s in scenarios if s.id not in solutions]
    if missing:
        raise LookupTableError(f"no solution for scenario id(s) {missing}")
    rows = {}
    for sc in scenarios:
        sol = solutions[sc.id]
        audit = sol.status
        if sol.status == INFEASIBLE:
            sol = OpfSolution.fallback(len(sc.tags))
        rows[sc.id] = TableRow(scenario=sc, solution=sol, audit=audit)
    return LookupTable(horizon_index=horizon_index, scenarios=scenarios,
                       rows=MappingProxyType(rows), created_at=created_at)


def select_level(actual: float, levels: LevelSet) -> int:
    """Level tag for a measured wind value: exact match, else nearest higher.

    Values above H3 clamp to H3. Among duplicated values (from clipping) the
    highest tag wins.
    """
    values = levels.values
    exact = [t for t, v in zip(LEVEL_TAGS, values) if v == actual]
    if exact:
        return max(exact)
    above = [v for v in values if v > actual]
    if not above:
        return LEVEL_TAGS[-1]
    nearest = min(above)
    return max(t for t, v in zip(LEVEL_TAGS, values) if v == nearest)


def dispatch_interval(table: LookupTable, actual_wind, levels=None,
                      interval_index: int = 0) -> DispatchDecision:
    """Select the table row matching measured wind and apply its factors."""
    levels = table.levels if levels is None else tuple(levels)
    actual = tuple(float(a) for a in actual_wind)
    if len(actual) != len(levels):
        raise ValueError(f"expected {len(levels)} wind values, got {len(actual)}")
    tags = tuple(select_level(a, ls) for a, ls in zip(actual, levels))
    clamped = tuple(a > ls.values[-1] for a, ls in zip(actual, levels))
    for a, ls, c in zip(actual, levels, clamped):
        if c:
            log.info("horizon %d interval %d: wind %.6f p.u. at bus %d above H3 %.6f, clamped",
                     table.horizon_index, interval_index, a, ls.bus, ls.values[-1])
    sid = encode_tags(tags)
    beta = table[sid].beta
    return DispatchDecision(
        horizon_index=table.horizon_index,
        interval_index=interval_index,
        actual_wind=actual,
        selected_scenario=sid,
        selected_tags=tags,
        selected_levels=tuple(ls.value(t) for ls, t in zip(levels, tags)),
        beta_applied=beta,
        injected=tuple(b * a for b, a in zip(beta, actual)),
        clamped=clamped,
    )


DISPATCH_LOG_COLUMNS = ["horizon", "interval", "ws_bus", "actual_mw", "selected_level",
                        "beta", "injected_mw", "clamped_flag"]


def dispatch_log_rows(decisions, levels_by_horizon, base_mva: float):
    """Flatten decisions into dispatch-log rows, one per wind station."""
    for d in decisions:
        levels = levels_by_horizon[d.horizon_index]
        for ls, a, t, b, inj, c in zip(levels, d.actual_wind, d.selected_tags,
                                       d.beta_applied, d.injected, d.clamped):
            yield [d.horizon_index, d.interval_index, ls.bus, repr(a * base_mva),
                   LEVEL_NAMES[t], repr(b), repr(inj * base_mva), int(c)]
