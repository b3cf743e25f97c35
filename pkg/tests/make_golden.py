"""Regenerate tests/data/sim_feeder15_seed1.json (run from the repo root)."""

import json
from pathlib import Path

from rtopf.grid import load_bundled
from rtopf.opf import PriceModel
from rtopf.scheduler import TimingConfig
from rtopf.simulator import run_simulation, synthesize_trace

GOLDEN = Path(__file__).parent / "data" / "sim_feeder15_seed1.json"


def golden_report():
    net = load_bundled("feeder15")
    trace = synthesize_trace(1, net, 3)
    return run_simulation(net, PriceModel(), TimingConfig(), trace, workers=2)


if __name__ == "__main__":
    report = golden_report()
    GOLDEN.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {GOLDEN}")
