"""Command-line entry point: ``rtopf validate|opf|table|simulate|report``.

Settings come from an optional JSON config file; command-line flags override
it. Powers on the command line and in files are in MW/MVAr.

Exit codes: 0 success, 1 input or validation error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from rtopf import __version__
from rtopf.grid import (
    NetworkFileError,
    NetworkValidationError,
    Network,
    build_admittance,
    bundled_network_path,
    load_network,
    mw_to_pu,
    network_from_dict,
    pu_to_mw,
    validate_network,
)
from rtopf.opf import OpfProblem, PriceModel, binding_constraints, solve_opf
from rtopf.powerflow import dump_state_csv, total_losses
from rtopf.scenario import DeviationConfig, read_forecast_csv
from rtopf.scheduler import TimingConfig
from rtopf.simulator import (
    DEFAULT_VOLATILITY,
    build_horizon_table,
    read_demand_csv,
    read_trace_csv,
    run_simulation,
    synthesize_trace,
    write_outputs,
)
from rtopf.util import atomic_write_text, write_csv

log = logging.getLogger("rtopf")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INTERNAL = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; mirrors the JSON config file."""

    network: str | None = None  # None selects the bundled feeder15
    prices: dict = field(default_factory=dict)
    delta1_mw: list[float] | None = None  # per WS; None means 10 % of rating
    timing: dict = field(default_factory=dict)
    seed: int = 1
    horizons: int = 3
    workers: int | None = None
    out: str = "rtopf_out"
    volatility_mw: float | None = None
    forecast_csv: str | None = None
    actual_csv: str | None = None
    demand_csv: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        for key in ("network", "forecast_csv", "actual_csv", "demand_csv"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{key}: file not found: {path}")
        if self.actual_csv is not None and self.forecast_csv is None:
            raise ConfigError("actual_csv requires forecast_csv")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.horizons, int) or self.horizons < 1:
            raise ConfigError(f"horizons must be an integer >= 1, got {self.horizons!r}")
        if self.workers is not None and (not isinstance(self.workers, int) or self.workers < 1):
            raise ConfigError(f"workers must be an integer >= 1, got {self.workers!r}")
        if self.volatility_mw is not None and not self.volatility_mw >= 0:
            raise ConfigError(f"volatility_mw must be >= 0, got {self.volatility_mw!r}")

    def load_network(self) -> Network:
        return load_network(self.network or bundled_network_path("feeder15"))

    def price_model(self) -> PriceModel:
        try:
            return PriceModel(**self.prices)
        except TypeError as exc:
            raise ConfigError(f"prices: {exc}") from None

    def timing_config(self) -> TimingConfig:
        try:
            return TimingConfig(**self.timing)
        except TypeError as exc:
            raise ConfigError(f"timing: {exc}") from None

    def deviation(self, net: Network) -> DeviationConfig:
        if self.delta1_mw is None:
            dev = DeviationConfig.default(net)
        else:
            values = list(self.delta1_mw)
            if len(values) == 1:
                values *= net.n_ws
            dev = DeviationConfig(tuple(mw_to_pu(d, net.base_mva) for d in values))
        dev.check(net)
        return dev


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--network", help="network JSON (default: bundled feeder15)")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizons", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--wall-clock-scale", type=float, dest="wall_clock_scale")
    p.add_argument("--delta1", type=_floats, metavar="F[,F...]",
                   help="base deviation per WS in MW (one value applies to all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtopf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file")
    p.add_argument("path", nargs="?", help="network JSON (default: bundled feeder15)")
    p.add_argument("--network", dest="network_flag")

    p = sub.add_parser("opf", help="solve one curtailment problem")
    _add_run_flags(p)
    p.add_argument("--wind", type=_floats, required=True, metavar="MW[,MW...]",
                   help="available wind per WS")
    p.add_argument("--dump-state", type=Path, help="write the optimal power-flow state as CSV")

    p = sub.add_parser("table", help="build one lookup table")
    _add_run_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--forecast", type=_floats, metavar="MW[,MW...]")
    g.add_argument("--forecast-csv")
    p.add_argument("--horizon", type=int, default=0, help="horizon to read from --forecast-csv")

    p = sub.add_parser("simulate", help="run the moving-horizon simulation")
    _add_run_flags(p)
    p.add_argument("--volatility", type=float, help="trace step bound in MW")
    p.add_argument("--forecast-csv")
    p.add_argument("--actual-csv")
    p.add_argument("--demand-csv")

    p = sub.add_parser("report", help="summarise a sim_report.json")
    p.add_argument("path", type=Path)
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None) is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    cfg = RunConfig.from_dict(data)
    overrides = {
        "network": args.network, "seed": args.seed, "horizons": args.horizons,
        "workers": args.workers, "out": args.out, "delta1_mw": args.delta1,
        "volatility_mw": getattr(args, "volatility", None),
        "forecast_csv": getattr(args, "forecast_csv", None),
        "actual_csv": getattr(args, "actual_csv", None),
        "demand_csv": getattr(args, "demand_csv", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.wall_clock_scale is not None:
        cfg.timing = {**cfg.timing, "wall_clock_scale": args.wall_clock_scale}
    cfg.validate()
    return cfg


def cmd_validate(args) -> int:
    path = args.network_flag or args.path or bundled_network_path("feeder15")
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        print(f"{path}: file not found", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_INPUT
    try:
        net = network_from_dict(data)
    except NetworkFileError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    violations = validate_network(net)
    if violations:
        print(f"{path}: {len(violations)} violation(s)")
        for v in violations:
            print(f"  - {v}")
        return EXIT_INPUT
    print(f"{path}: ok ({net.n_bus} buses, {len(net.branches)} branches, "
          f"{net.n_ws} wind stations)")
    return EXIT_OK


def _per_ws(values, net: Network, what: str) -> tuple[float, ...]:
    if len(values) != net.n_ws:
        raise ConfigError(f"{what}: expected {net.n_ws} values, got {len(values)}")
    return tuple(mw_to_pu(v, net.base_mva) for v in values)


def cmd_opf(args) -> int:
    cfg = resolve_config(args)
    net = cfg.load_network()
    problem = OpfProblem(net=net, y=build_admittance(net),
                         wind_available=_per_ws(args.wind, net, "--wind"),
                         prices=cfg.price_model())
    sol = solve_opf(problem)
    out = {"status": sol.status, "beta": list(sol.beta), "objective": sol.objective,
           "evaluations": sol.evaluations}
    if sol.state is not None and sol.state.converged:
        out |= {
            "p_slack_mw": pu_to_mw(sol.state.p_slack, net.base_mva),
            "q_slack_mvar": pu_to_mw(sol.state.q_slack, net.base_mva),
            "losses_mw": pu_to_mw(total_losses(net, sol.state), net.base_mva),
            "binding": binding_constraints(problem, sol),
        }
        if args.dump_state is not None:
            dump_state_csv(sol.state, args.dump_state)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_table(args) -> int:
    cfg = resolve_config(args)
    net = cfg.load_network()
    if args.forecast is not None:
        forecast = _per_ws(args.forecast, net, "--forecast")
    elif args.forecast_csv is not None:
        by_h = read_forecast_csv(args.forecast_csv, net)
        if args.horizon not in by_h:
            raise ConfigError(f"{args.forecast_csv}: no forecast for horizon {args.horizon}")
        forecast = by_h[args.horizon]
    else:
        raise ConfigError("table needs --forecast or --forecast-csv")
    timing = cfg.timing_config()
    table, report = build_horizon_table(net, build_admittance(net), cfg.price_model(), timing,
                                        cfg.deviation(net), forecast, args.horizon, cfg.workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    buses = [w.bus for w in net.wind_stations]
    header = ["scenario_id", "label", *(f"wind_mw_bus{b}" for b in buses),
              *(f"beta_bus{b}" for b in buses), "objective", "status", "solver_status"]
    rows = []
    for sid, row in sorted(table.rows.items()):
        rows.append([sid, row.scenario.label,
                     *(repr(pu_to_mw(w, net.base_mva)) for w in row.scenario.wind),
                     *(repr(b) for b in row.beta), repr(row.solution.objective),
                     row.solution.status, row.audit])
    write_csv(out / "table.csv", header, rows)
    atomic_write_text(out / "table.json", json.dumps({
        "horizon": table.horizon_index,
        "levels_mw": [{"bus": ls.bus, **{k: pu_to_mw(v, net.base_mva)
                                         for k, v in ls.as_dict().items()}}
                      for ls in table.levels],
        "rows": len(table), "fallback_rows": table.n_fallback,
        "scheduler": report.to_dict(),
    }, indent=2) + "\n")
    print(f"{len(table)} rows ({table.n_fallback} fallback) written to {out / 'table.csv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    net = cfg.load_network()
    timing = cfg.timing_config()
    dev = cfg.deviation(net)
    if cfg.forecast_csv is not None and cfg.actual_csv is None:
        raise ConfigError("simulate with forecast_csv also needs actual_csv")
    if cfg.actual_csv is not None:
        trace = read_trace_csv(cfg.actual_csv, cfg.forecast_csv, net, timing.n_updates)
    else:
        vol = (DEFAULT_VOLATILITY if cfg.volatility_mw is None
               else mw_to_pu(cfg.volatility_mw, net.base_mva))
        trace = synthesize_trace(cfg.seed, net, cfg.horizons, vol, timing.n_updates)
    trace.check(net)
    demand = read_demand_csv(cfg.demand_csv, net) if cfg.demand_csv else None
    report = run_simulation(net, cfg.price_model(), timing, trace, dev=dev,
                            workers=cfg.workers, demand=demand)
    paths = write_outputs(report, net, cfg.out)
    atomic_write_text(Path(cfg.out) / "config.json",
                      json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    summary = report.to_dict()
    print(json.dumps({"energy": summary["energy"], "economics": summary["economics"],
                      "clamp_events": summary["clamp_events"],
                      "scheduler_overruns": summary["scheduler_overruns"],
                      "outputs": [str(p) for p in paths]}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        data = json.loads(args.path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"report not found: {args.path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.path}: line {exc.lineno}: {exc.msg}") from None
    try:
        e, econ = data["energy"], data["economics"]
        lines = [
            f"horizons {data['horizons']}, intervals {data['intervals']}",
            f"wind available {e['available_mwh']:.4f} MWh, injected {e['injected_mwh']:.4f} MWh",
            f"curtailed {e['curtailed_mwh']:.4f} MWh "
            f"(beta {e['curtailed_by_beta_mwh']:.4f}, level rounding "
            f"{e['curtailed_by_conservatism_mwh']:.4f})",
            f"imports {e['imported_p_mwh']:.4f} MWh / {e['imported_q_mvarh']:.4f} MVArh, "
            f"losses {e['losses_mwh']:.4f} MWh",
            f"net benefit {econ['net_benefit']:.2f}",
            f"clamp events {data['clamp_events']}, overruns {data['scheduler_overruns']}, "
            f"reverse-flow violations {data['reverse_flow_violations']}",
        ]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.path}: not a simulation report ({exc})") from None
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "opf": cmd_opf, "table": cmd_table,
            "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; keep 2 reserved for internal errors
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NetworkValidationError as exc:
        print("network validation failed:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        print("internal error: this is a bug; please report it with the command line, "
              "config file and the traceback above", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
