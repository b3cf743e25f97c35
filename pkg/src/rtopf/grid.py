"""Network data model, validation, per-unit conversion and Y-bus assembly.

All quantities held by :class:`Network` are in per-unit on ``base_mva``.
Bus 0 is the slack bus (the HV interface, fixed at 1.0 p.u. / 0 rad).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

SLACK = "slack"
PQ = "pq"
DEFAULT_BASE_MVA = 10.0


class NetworkFileError(ValueError):
    """Raised when a network file cannot be parsed."""


class NetworkValidationError(ValueError):
    """Raised when a parsed network violates one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid network: " + "; ".join(self.violations))


def mw_to_pu(value, base_mva):
    return value / base_mva


def pu_to_mw(value, base_mva):
    return value * base_mva


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_min: float = 0.9
    v_max: float = 1.1
    p_demand: float = 0.0
    q_demand: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    s_max: float = np.inf


@dataclass(frozen=True)
class WindStation:
    bus: int
    p_rated: float


@dataclass(frozen=True)
class Network:
    """Immutable per-unit network description.

    Construction does not validate; use :func:`validate_network` (or load
    through :func:`load_network`, which does).
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    wind_stations: tuple[WindStation, ...] = ()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "wind_stations", tuple(self.wind_stations))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_ws(self) -> int:
        return len(self.wind_stations)

    # Array views are cached per instance; copies made via with_* start fresh.
    @cached_property
    def p_demand(self) -> np.ndarray:
        return _frozen([b.p_demand for b in self.buses])

    @cached_property
    def q_demand(self) -> np.ndarray:
        return _frozen([b.q_demand for b in self.buses])

    @cached_property
    def v_min(self) -> np.ndarray:
        return _frozen([b.v_min for b in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return _frozen([b.v_max for b in self.buses])

    @cached_property
    def ws_buses(self) -> np.ndarray:
        return _frozen([w.bus for w in self.wind_stations], dtype=int)

    @cached_property
    def p_rated(self) -> np.ndarray:
        return _frozen([w.p_rated for w in self.wind_stations])

    @cached_property
    def branch_arrays(self) -> dict[str, np.ndarray]:
        """from/to indices, series admittance, half shunt and s_max per branch."""
        brs = self.branches
        return {
            "from": _frozen([b.from_bus for b in brs], dtype=int),
            "to": _frozen([b.to_bus for b in brs], dtype=int),
            "ys": _frozen([1.0 / complex(b.r, b.x) if (b.r or b.x) else 0j for b in brs],
                          dtype=complex),
            "half_shunt": _frozen([0.5j * b.b_shunt for b in brs], dtype=complex),
            "s_max": _frozen([b.s_max for b in brs]),
        }

    def with_demand(self, p_demand, q_demand) -> Network:
        """Return a copy with per-bus demands (p.u.) replaced."""
        buses = tuple(
            replace(b, p_demand=float(p), q_demand=float(q))
            for b, p, q in zip(self.buses, p_demand, q_demand)
        )
        return replace(self, buses=buses)

    def with_branches(self, branches) -> Network:
        return replace(self, branches=tuple(branches))


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix split into conductance and susceptance."""

    g: np.ndarray
    b: np.ndarray
    y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y = self.g + 1j * self.b
        y.flags.writeable = False
        object.__setattr__(self, "y", y)


def validate_network(net: Network) -> list[str]:
    """List every invariant the network violates; empty when valid."""
    violations = []
    n = net.n_bus
    ids = [b.id for b in net.buses]

    if ids != list(range(n)):
        violations.append("non-contiguous bus ids (expected 0..n-1 in order)")

    slacks = [b.id for b in net.buses if b.kind == SLACK]
    if len(slacks) == 0:
        violations.append("no slack bus")
    elif len(slacks) > 1:
        violations.append(f"multiple slack buses: {slacks}")
    elif slacks[0] != 0:
        violations.append(f"slack bus must be bus 0, found bus {slacks[0]}")

    for b in net.buses:
        if b.kind not in (SLACK, PQ):
            violations.append(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (0.0 < b.v_min < b.v_max):
            violations.append(f"bus {b.id}: invalid voltage bounds ({b.v_min}, {b.v_max})")
        if not (np.isfinite(b.p_demand) and np.isfinite(b.q_demand)):
            violations.append(f"bus {b.id}: non-finite demand")
        elif b.kind == PQ and (b.p_demand < 0 or b.q_demand < 0):
            violations.append(f"bus {b.id}: negative demand")

    if not (np.isfinite(net.base_mva) and net.base_mva > 0):
        violations.append(f"non-positive base_mva {net.base_mva}")

    valid_ids = set(range(n))
    adjacency = {i: [] for i in valid_ids}
    for k, br in enumerate(net.branches):
        if br.from_bus not in valid_ids or br.to_bus not in valid_ids:
            violations.append(
                f"branch {k}: dangling branch endpoint ({br.from_bus}, {br.to_bus})"
            )
            continue
        if br.from_bus == br.to_bus:
            violations.append(f"branch {k}: from_bus equals to_bus ({br.from_bus})")
        if br.r < 0:
            violations.append(f"branch {k}: negative resistance r={br.r}")
        if br.x == 0:
            violations.append(f"branch {k}: zero reactance")
        if not br.s_max > 0:
            violations.append(f"branch {k}: non-positive s_max {br.s_max}")
        adjacency[br.from_bus].append(br.to_bus)
        adjacency[br.to_bus].append(br.from_bus)

    if n and 0 in valid_ids:
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in adjacency[i]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        for i in sorted(valid_ids - seen):
            violations.append(f"bus {i}: unreachable from slack")

    ws_seen = set()
    for w in net.wind_stations:
        if w.bus not in valid_ids:
            violations.append(f"wind station at unknown bus {w.bus}")
            continue
        if net.buses[w.bus].kind != PQ:
            violations.append(f"wind station at bus {w.bus}: bus is not a pq bus")
        if w.bus in ws_seen:
            violations.append(f"wind station at bus {w.bus}: more than one station on bus")
        ws_seen.add(w.bus)
        if not w.p_rated > 0:
            violations.append(f"wind station at bus {w.bus}: non-positive rated power")

    return violations


def build_admittance(net: Network) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix (pi-model branches, no taps)."""
    n = net.n_bus
    y = np.zeros((n, n), dtype=complex)
    for k, br in enumerate(net.branches):
        z = complex(br.r, br.x)
        if z == 0:
            raise ValueError(f"branch {k}: singular branch (r = x = 0)")
        ys = 1.0 / z
        i, j = br.from_bus, br.to_bus
        y[i, j] -= ys
        y[j, i] -= ys
        y[i, i] += ys + 0.5j * br.b_shunt
        y[j, j] += ys + 0.5j * br.b_shunt
    y.flags.writeable = False
    g = y.real.copy()
    b = y.imag.copy()
    g.flags.writeable = False
    b.flags.writeable = False
    return AdmittanceMatrix(g=g, b=b)


def _require(record, key, where):
    try:
        return record[key]
    except (KeyError, TypeError):
        raise NetworkFileError(f"{where}: missing field {key!r}") from None


def _number(record, key, where, default=None):
    if default is not None and key not in record:
        return float(default)
    value = _require(record, key, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NetworkFileError(f"{where}: field {key!r} must be a number, got {value!r}")
    return float(value)


def network_from_dict(data: dict, name: str = "") -> Network:
    """Convert the JSON network schema (physical units) to a per-unit Network."""
    if not isinstance(data, dict):
        raise NetworkFileError("top level: expected a JSON object")
    base = _number(data, "base_mva", "top level", default=DEFAULT_BASE_MVA)
    if not base > 0:
        raise NetworkFileError(f"top level: base_mva must be positive, got {base}")

    buses = []
    for k, rec in enumerate(_require(data, "buses", "top level")):
        where = f"buses[{k}]"
        bid = _require(rec, "id", where)
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise NetworkFileError(f"{where}: field 'id' must be an integer")
        buses.append(
            Bus(
                id=bid,
                kind=str(_require(rec, "kind", where)).lower(),
                v_min=_number(rec, "v_min", where, default=0.9),
                v_max=_number(rec, "v_max", where, default=1.1),
                p_demand=mw_to_pu(_number(rec, "p_demand_mw", where, default=0.0), base),
                q_demand=mw_to_pu(_number(rec, "q_demand_mvar", where, default=0.0), base),
            )
        )

    branches = []
    for k, rec in enumerate(data.get("branches", [])):
        where = f"branches[{k}]"
        s_max = rec.get("s_max_mva") if isinstance(rec, dict) else None
        branches.append(
            Branch(
                from_bus=int(_number(rec, "from", where)),
                to_bus=int(_number(rec, "to", where)),
                r=_number(rec, "r_pu", where),
                x=_number(rec, "x_pu", where),
                b_shunt=_number(rec, "b_shunt_pu", where, default=0.0),
                s_max=np.inf if s_max is None else mw_to_pu(_number(rec, "s_max_mva", where), base),
            )
        )

    stations = []
    for k, rec in enumerate(data.get("wind_stations", [])):
        where = f"wind_stations[{k}]"
        stations.append(
            WindStation(
                bus=int(_number(rec, "bus", where)),
                p_rated=mw_to_pu(_number(rec, "p_rated_mw", where), base),
            )
        )

    return Network(base_mva=base, buses=buses, branches=branches,
                   wind_stations=stations, name=name)


def network_to_dict(net: Network) -> dict:
    base = net.base_mva
    return {
        "base_mva": base,
        "buses": [
            {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max,
             "p_demand_mw": pu_to_mw(b.p_demand, base),
             "q_demand_mvar": pu_to_mw(b.q_demand, base)}
            for b in net.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r_pu": br.r, "x_pu": br.x,
             "b_shunt_pu": br.b_shunt,
             **({} if np.isinf(br.s_max) else {"s_max_mva": pu_to_mw(br.s_max, base)})}
            for br in net.branches
        ],
        "wind_stations": [
            {"bus": w.bus, "p_rated_mw": pu_to_mw(w.p_rated, base)}
            for w in net.wind_stations
        ],
    }


def load_network(path) -> Network:
    """Read, convert and validate a network JSON file.

    Raises:
        NetworkFileError: the file is missing, is not JSON, or lacks fields.
        NetworkValidationError: the network parses but violates invariants.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkFileError(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFileError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        net = network_from_dict(data, name=path.stem)
    except NetworkFileError as exc:
        raise NetworkFileError(f"{path}: {exc}") from exc
    violations = validate_network(net)
    if violations:
        raise NetworkValidationError(violations)
    return net


def bundled_network_path(name: str = "feeder15") -> Path:
    return Path(str(resources.files("rtopf") / "data" / f"{name}.json"))


def load_bundled(name: str = "feeder15") -> Network:
    """Load one of the feeders shipped with the package."""
    return load_network(bundled_network_path(name))
