"""Wind levels around a forecast and the joint scenario set.

Each wind station gets seven levels ``L3 L2 L1 M H1 H2 H3``; the offsets from
the forecast are 1, 2 and 3 times a base deviation, clipped to ``[0, p_rated]``.
Scenario ids encode one level tag per station in base 7, first station most
significant.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np

from rtopf.grid import Network, WindStation, mw_to_pu

LEVEL_TAGS = (-3, -2, -1, 0, 1, 2, 3)
LEVEL_NAMES = {-3: "L3", -2: "L2", -1: "L1", 0: "M", 1: "H1", 2: "H2", 3: "H3"}
N_LEVELS = len(LEVEL_TAGS)
# offset multiples of the base deviation: dP3 = 1.5 dP2 = 3 dP1
DEVIATION_MULTIPLES = (1, 2, 3)
DEFAULT_DELTA1_FRACTION = 0.1


@dataclass(frozen=True)
class DeviationConfig:
    delta1: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "delta1", tuple(float(d) for d in self.delta1))
        for d in self.delta1:
            if not (np.isfinite(d) and d >= 0):
                raise ValueError(f"delta1 must be finite and non-negative, got {d}")

    @classmethod
    def default(cls, net: Network, fraction: float = DEFAULT_DELTA1_FRACTION) -> DeviationConfig:
        return cls(tuple(fraction * w.p_rated for w in net.wind_stations))

    def check(self, net: Network) -> None:
        if len(self.delta1) != net.n_ws:
            raise ValueError(f"expected {net.n_ws} delta1 values, got {len(self.delta1)}")
        for d, w in zip(self.delta1, net.wind_stations):
            if 3 * d > w.p_rated * (1 + 1e-12):
                raise ValueError(
                    f"delta1 {d} at bus {w.bus}: three times it exceeds p_rated {w.p_rated}"
                )


@dataclass(frozen=True)
class LevelSet:
    """Seven ascending wind values for one station, indexed like LEVEL_TAGS."""

    bus: int
    p_rated: float
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != N_LEVELS:
            raise ValueError(f"a level set holds {N_LEVELS} values, got {len(self.values)}")

    @property
    def forecast(self) -> float:
        return self.values[3]

    def value(self, tag: int) -> float:
        return self.values[tag + 3]

    def as_dict(self) -> dict[str, float]:
        return {LEVEL_NAMES[t]: v for t, v in zip(LEVEL_TAGS, self.values)}


@dataclass(frozen=True)
class Scenario:
    id: int
    tags: tuple[int, ...]
    wind: tuple[float, ...]

    @property
    def label(self) -> str:
        return "(" + ", ".join(LEVEL_NAMES[t] for t in self.tags) + ")"


@dataclass(frozen=True)
class ScenarioSet:
    levels: tuple[LevelSet, ...]
    scenarios: tuple[Scenario, ...]

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, scenario_id: int) -> Scenario:
        return self.scenarios[scenario_id]

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.scenarios]


def clip_level(value: float, p_rated: float) -> float:
    return min(max(value, 0.0), p_rated)


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


def generate_levels(forecast: float, delta1: float, ws: WindStation) -> LevelSet:
    """Seven levels for one station, clipped to ``[0, ws.p_rated]``.

    Offsets are formed in exact decimal arithmetic on the shortest repr of the
    inputs and rounded once, so ``0.15 - 0.1`` yields ``0.05`` rather than
    ``0.04999999999999999``.
    """
    if not (0.0 <= forecast <= ws.p_rated):
        raise ValueError(
            f"forecast {forecast} at bus {ws.bus} outside [0, {ws.p_rated}]"
        )
    m, d = _dec(forecast), _dec(delta1)
    low = [max(float(m - k * d), 0.0) for k in reversed(DEVIATION_MULTIPLES)]
    high = [min(float(m + k * d), ws.p_rated) for k in DEVIATION_MULTIPLES]
    return LevelSet(bus=ws.bus, p_rated=ws.p_rated, values=(*low, float(forecast), *high))


def build_levels(net: Network, forecast, dev: DeviationConfig) -> tuple[LevelSet, ...]:
    """One LevelSet per wind station for a per-station forecast (p.u.)."""
    dev.check(net)
    forecast = tuple(forecast)
    if len(forecast) != net.n_ws:
        raise ValueError(f"expected {net.n_ws} forecast values, got {len(forecast)}")
    return tuple(generate_levels(f, d, ws)
                 for f, d, ws in zip(forecast, dev.delta1, net.wind_stations))


def encode_tags(tags) -> int:
    sid = 0
    for t in tags:
        if t not in LEVEL_NAMES:
            raise ValueError(f"invalid level tag {t}")
        sid = sid * N_LEVELS + (t + 3)
    return sid


def decode_id(scenario_id: int, n_ws: int) -> tuple[int, ...]:
    if not 0 <= scenario_id < N_LEVELS**n_ws:
        raise ValueError(f"scenario id {scenario_id} out of range for {n_ws} stations")
    digits = []
    for _ in range(n_ws):
        scenario_id, d = divmod(scenario_id, N_LEVELS)
        digits.append(d - 3)
    return tuple(reversed(digits))


def enumerate_scenarios(levels) -> ScenarioSet:
    """Cartesian product of the per-station levels, ids in base-7 order."""
    levels = tuple(levels)
    scenarios = []
    for tags in itertools.product(LEVEL_TAGS, repeat=len(levels)):
        wind = tuple(ls.value(t) for ls, t in zip(levels, tags))
        scenarios.append(Scenario(id=encode_tags(tags), tags=tags, wind=wind))
    return ScenarioSet(levels=levels, scenarios=tuple(scenarios))


def read_forecast_csv(path, net: Network) -> dict[int, tuple[float, ...]]:
    """Read ``horizon_index, ws_bus, p_forecast_mw`` rows into per-horizon p.u. tuples."""
    path = Path(path)
    by_horizon: dict[int, dict[int, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"horizon_index", "ws_bus", "p_forecast_mw"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                h = int(row["horizon_index"])
                bus = int(row["ws_bus"])
                p = float(row["p_forecast_mw"])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            by_horizon.setdefault(h, {})[bus] = mw_to_pu(p, net.base_mva)
    out = {}
    for h, rows in sorted(by_horizon.items()):
        try:
            out[h] = tuple(rows[w.bus] for w in net.wind_stations)
        except KeyError as exc:
            raise ValueError(f"{path}: horizon {h} has no forecast for bus {exc.args[0]}") from None
    return out
