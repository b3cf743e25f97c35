"""Deadline-bounded concurrent solving of all scenario OPFs of one horizon."""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field

from rtopf.opf import FALLBACK, DeadlineExceeded, OpfSolution, solve_opf

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingConfig:
    """Cycle timing in simulated seconds.

    The solve budget is what remains of the horizon after three data steps
    before the solve and one after it (120 - 4 * 2 = 112 by default).
    """

    t_horizon: float = 120.0
    t_update: float = 20.0
    t_data: float = 2.0
    n_updates: int = 6
    wall_clock_scale: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.n_updates, int) and self.n_updates >= 1):
            raise ValueError(f"n_updates must be an integer >= 1, got {self.n_updates}")
        if abs(self.t_horizon - self.n_updates * self.t_update) > 1e-9 * self.t_horizon:
            raise ValueError(
                f"t_horizon ({self.t_horizon}) must equal n_updates * t_update "
                f"({self.n_updates} * {self.t_update})"
            )
        if self.t_data < 0:
            raise ValueError("t_data must be non-negative")
        if not self.t_solve > 0:
            raise ValueError(f"no time left to solve: t_solve = {self.t_solve}")
        if not self.wall_clock_scale > 0:
            raise ValueError("wall_clock_scale must be positive")

    @property
    def t_solve(self) -> float:
        return self.t_horizon - 4 * self.t_data

    @property
    def solve_budget(self) -> float:
        """Real seconds granted to one batch of solves."""
        return self.t_solve * self.wall_clock_scale


class Deadline:
    """Shared monotonic deadline polled by running solves."""

    def __init__(self, seconds: float):
        self.end = time.monotonic() + seconds

    def remaining(self) -> float:
        return self.end - time.monotonic()

    def expired(self) -> bool:
        return time.monotonic() >= self.end


@dataclass
class ScenarioTiming:
    wall_time: float | None
    status: str
    worker: str | None


@dataclass
class SolveReport:
    budget: float
    workers: int
    budget_used: float = 0.0
    overruns: int = 0
    failures: int = 0
    unique_solves: int = 0
    per_scenario: dict[int, ScenarioTiming] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "budget_s": self.budget,
            "budget_used_s": self.budget_used,
            "workers": self.workers,
            "overruns": self.overruns,
            "failures": self.failures,
            "unique_solves": self.unique_solves,
            "scenarios": {
                str(k): {"wall_time_s": v.wall_time, "status": v.status, "worker": v.worker}
                for k, v in sorted(self.per_scenario.items())
            },
        }


def default_workers() -> int:
    return os.cpu_count() or 1


def _problem_key(problem):
    # Problems built for one horizon share net and y objects; identical wind
    # vectors (clipping duplicates, delta1 = 0) then solve identically.
    return (id(problem.net), id(problem.y), problem.wind_available, problem.prices)


def _timed(solver, problem, deadline):
    t0 = time.perf_counter()
    sol = solver(problem, deadline=deadline)
    return sol, time.perf_counter() - t0, threading.current_thread().name


def solve_all(problems, timing: TimingConfig, workers: int | None = None, solver=solve_opf):
    """Solve every problem within ``timing.solve_budget`` real seconds.

    Returns ``(solutions, report)`` with ``solutions`` keyed exactly like
    ``problems``. Solves still running at the deadline, cancelled before
    starting, or raising are replaced by fallback solutions (beta = 0).
    ``solver`` is called as ``solver(problem, deadline=...)``.
    """
    if not problems:
        raise ValueError("no problems to solve")
    ids = sorted(problems)
    groups: dict[tuple, list[int]] = {}
    for sid in ids:
        groups.setdefault(_problem_key(problems[sid]), []).append(sid)

    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    workers = min(workers, len(groups))
    report = SolveReport(budget=timing.solve_budget, workers=workers,
                         unique_solves=len(groups))

    start = time.monotonic()
    deadline = Deadline(timing.solve_budget)
    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="opf-worker")
    futures = {pool.submit(_timed, solver, problems[members[0]], deadline): key
               for key, members in groups.items()}
    done, _ = wait(futures, timeout=max(0.0, deadline.remaining()))
    pool.shutdown(wait=False, cancel_futures=True)
    report.budget_used = time.monotonic() - start

    solutions = {}
    for fut, key in futures.items():
        members = groups[key]
        n_ws = problems[members[0]].net.n_ws
        timing_rec = ScenarioTiming(wall_time=None, status=FALLBACK, worker=None)
        sol = OpfSolution.fallback(n_ws)
        if fut in done:
            try:
                sol, wall, worker = fut.result()
                timing_rec = ScenarioTiming(wall_time=wall, status=sol.status, worker=worker)
            except DeadlineExceeded:
                report.overruns += len(members)
                log.warning("scenarios %s overran the solve deadline", members)
            except Exception:
                report.failures += len(members)
                log.exception("solve failed for scenarios %s; using fallback", members)
        else:
            report.overruns += len(members)
            log.warning("scenarios %s unfinished at the deadline", members)
        for sid in members:
            solutions[sid] = sol
            report.per_scenario[sid] = timing_rec

    return {sid: solutions[sid] for sid in ids}, report
