"""Per-scenario curtailment OPF over the wind curtailment factors.

The problem is solved in reduced space: the only decision variables are the
curtailment factors ``beta`` (one per wind station, boxed in [0, 1]); the
network state follows from an embedded AC power flow. The solver seeds from a
feasibility-filtered grid and polishes with an augmented Lagrangian whose
subproblems are solved by spectral projected gradient with a non-monotone
line search.

``oracle_solve`` enumerates a finer grid exhaustively and shares nothing with
the polish path beyond :func:`evaluate`.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from rtopf.grid import AdmittanceMatrix, Network, build_admittance
from rtopf.powerflow import (
    PowerFlowState,
    branch_losses,
    make_injections,
    solve_powerflow,
    total_losses,
)

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
FALLBACK = "fallback"

CONSTRAINT_TOL = 1e-6
GRID_STEP = 0.05
MAX_GRID_POINTS = 10**6
PENALTY_GROWTH = 10.0
MAX_OUTER = 8
INITIAL_PENALTY = 100.0
FD_STEP = 1e-6


class DeadlineExceeded(RuntimeError):
    """Raised inside a solve when its shared deadline has passed."""


@dataclass(frozen=True)
class PriceModel:
    """Energy prices in currency per MWh (reactive: per MVArh)."""

    price_wind: float = 80.0
    price_loss: float = 50.0
    price_p_import: float = 60.0
    price_q_import: float = 10.0

    def __post_init__(self):
        for name in ("price_wind", "price_loss", "price_p_import", "price_q_import"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class OpfProblem:
    net: Network
    y: AdmittanceMatrix
    wind_available: tuple[float, ...]
    prices: PriceModel = field(default_factory=PriceModel)

    def __post_init__(self):
        wind = tuple(float(w) for w in self.wind_available)
        object.__setattr__(self, "wind_available", wind)
        if len(wind) != self.net.n_ws:
            raise ValueError(f"expected {self.net.n_ws} wind values, got {len(wind)}")
        for w, ws in zip(wind, self.net.wind_stations):
            if not (0.0 <= w <= ws.p_rated * (1 + 1e-12)):
                raise ValueError(
                    f"wind at bus {ws.bus} must lie in [0, {ws.p_rated}], got {w}"
                )

    @classmethod
    def build(cls, net, wind_available, prices=None, y=None):
        return cls(net=net, y=build_admittance(net) if y is None else y,
                   wind_available=tuple(wind_available),
                   prices=PriceModel() if prices is None else prices)


@dataclass(frozen=True)
class Evaluation:
    """Objective, raw constraint values and state at one ``beta``.

    ``constraints`` holds ``g(beta)`` with feasibility meaning ``g <= 0``; the
    last entry is the non-physical marker (``+inf`` when the power flow failed).
    """

    beta: tuple[float, ...]
    objective: float
    constraints: np.ndarray
    state: PowerFlowState

    @property
    def violations(self) -> np.ndarray:
        return np.maximum(self.constraints, 0.0)

    @property
    def max_violation(self) -> float:
        return float(np.max(self.violations)) if self.constraints.size else 0.0

    @property
    def feasible(self) -> bool:
        return self.state.converged and self.max_violation <= CONSTRAINT_TOL


@dataclass(frozen=True)
class OpfSolution:
    beta: tuple[float, ...]
    objective: float
    state: PowerFlowState | None
    status: str
    evaluations: int = 0

    @classmethod
    def fallback(cls, n_ws: int) -> OpfSolution:
        return cls(beta=(0.0,) * n_ws, objective=math.nan, state=None, status=FALLBACK)


def constraint_labels(net: Network) -> list[str]:
    """Names of the entries of :attr:`Evaluation.constraints`, in order."""
    labels = [f"v_min[bus {i}]" for i in range(net.n_bus)]
    labels += [f"v_max[bus {i}]" for i in range(net.n_bus)]
    labels += [f"s_max[branch {k} {br.from_bus}-{br.to_bus}]"
               for k, br in enumerate(net.branches)]
    labels += ["p_slack>=0", "q_slack>=0", "non_physical"]
    return labels


def objective_value(problem: OpfProblem, wind_injected: float, state: PowerFlowState) -> float:
    """Net benefit rate in currency per hour (prices per MWh, powers in MW)."""
    p = problem.prices
    base = problem.net.base_mva
    loss = total_losses(problem.net, state)
    return base * (p.price_wind * wind_injected - p.price_loss * loss
                   - p.price_p_import * state.p_slack - p.price_q_import * state.q_slack)


@njit(cache=True)
def _constraint_vector(v, p_slack, q_slack, v_min, v_max, fr, to, ys, sh, s_max):
    n = v.size
    nb = fr.size
    g = np.empty(2 * n + nb + 3)
    for i in range(n):
        vm = abs(v[i])
        g[i] = v_min[i] - vm
        g[n + i] = vm - v_max[i]
    for k in range(nb):
        vi = v[fr[k]]
        vj = v[to[k]]
        s_from = abs(vi * np.conj(ys[k] * (vi - vj) + sh[k] * vi))
        s_to = abs(vj * np.conj(ys[k] * (vj - vi) + sh[k] * vj))
        g[2 * n + k] = max(s_from, s_to) - s_max[k]
    g[2 * n + nb] = -p_slack
    g[2 * n + nb + 1] = -q_slack
    g[2 * n + nb + 2] = -np.inf
    return g


def evaluate(problem: OpfProblem, beta) -> Evaluation:
    """Run the power flow at ``beta`` and score objective and constraints."""
    beta = np.asarray(beta, dtype=float)
    net = problem.net
    if beta.shape != (net.n_ws,):
        raise ValueError(f"beta must have {net.n_ws} entries, got shape {beta.shape}")
    if not all(0.0 <= b <= 1.0 for b in beta.tolist()):
        raise ValueError(f"beta must lie in [0, 1], got {beta}")

    injected = beta * np.asarray(problem.wind_available)
    state = solve_powerflow(net, problem.y, make_injections(net, injected))
    if not state.converged:
        g = np.full(2 * net.n_bus + len(net.branches) + 3, -np.inf)
        g[-1] = np.inf
        return Evaluation(tuple(beta.tolist()), -np.inf, g, state)

    arr = net.branch_arrays
    g = _constraint_vector(state.e + 1j * state.f, state.p_slack, state.q_slack,
                           net.v_min, net.v_max, arr["from"], arr["to"], arr["ys"],
                           arr["half_shunt"], arr["s_max"])
    obj = objective_value(problem, float(np.sum(injected)), state)
    return Evaluation(tuple(beta.tolist()), obj, g, state)


def _check_deadline(deadline):
    if deadline is not None and deadline.expired():
        raise DeadlineExceeded("solve deadline passed")


def _grid(step: float, n: int):
    count = int(round(1.0 / step)) + 1
    if count**n > MAX_GRID_POINTS:
        raise ValueError(
            f"grid too large: {count}^{n} = {count**n} points exceeds {MAX_GRID_POINTS}"
        )
    axis = [min(1.0, k * step) for k in range(count)]
    axis[-1] = 1.0
    return itertools.product(axis, repeat=n)


def _grid_search(problem, step, deadline=None):
    """Best feasible grid point; ties keep the lexicographically smallest."""
    best = None
    count = 0
    for k, beta in enumerate(_grid(step, problem.net.n_ws)):
        if deadline is not None and k % 32 == 0:
            _check_deadline(deadline)
        ev = evaluate(problem, beta)
        count += 1
        if ev.feasible and (best is None or ev.objective > best.objective):
            best = ev
    return best, count


def _solution(ev: Evaluation, status: str, count: int) -> OpfSolution:
    return OpfSolution(beta=ev.beta, objective=ev.objective, state=ev.state,
                       status=status, evaluations=count)


def oracle_solve(problem: OpfProblem, resolution: float = 0.02) -> OpfSolution:
    """Exhaustive search over {0, res, 2 res, ..., 1}^n_ws (feasible points only)."""
    best, count = _grid_search(problem, resolution)
    if best is None:
        ev = evaluate(problem, np.zeros(problem.net.n_ws))
        return _solution(ev, INFEASIBLE, count)
    return _solution(best, OPTIMAL, count)


class _Merit:
    """Augmented-Lagrangian merit for minimising ``-f`` subject to ``g <= 0``."""

    def __init__(self, problem, scale):
        self.problem = problem
        self.scale = scale
        self.calls = 0
        self.lam = None
        self.rho = INITIAL_PENALTY
        self.cache = {}

    def evaluation(self, x):
        key = tuple(x.tolist())
        ev = self.cache.get(key)
        if ev is None:
            ev = evaluate(self.problem, x)
            self.calls += 1
            if len(self.cache) > 4096:
                self.cache.clear()
            self.cache[key] = ev
        return ev

    def __call__(self, x):
        ev = self.evaluation(x)
        if not ev.state.converged:
            return np.inf
        g = ev.constraints[:-1]
        lam = self.lam
        shifted = np.maximum(0.0, lam + self.rho * g)
        return -ev.objective / self.scale + (shifted @ shifted - lam @ lam) / (2 * self.rho)

    def gradient(self, x, fx):
        grad = np.zeros_like(x)
        for j in range(x.size):
            up = x.copy()
            dn = x.copy()
            up[j] = min(1.0, x[j] + FD_STEP)
            dn[j] = max(0.0, x[j] - FD_STEP)
            f_up = self(up) if up[j] != x[j] else fx
            f_dn = self(dn) if dn[j] != x[j] else fx
            if not (np.isfinite(f_up) and np.isfinite(f_dn)):
                return None
            grad[j] = (f_up - f_dn) / (up[j] - dn[j])
        return grad


def _projected_gradient(merit, x, max_iter=40, tol=1e-8, memory=5):
    """Minimise ``merit`` over the unit box.

    Spectral (Barzilai-Borwein) steps with a non-monotone backtracking test
    against the largest of the last ``memory`` merit values.
    """
    fx = merit(x)
    gx = merit.gradient(x, fx)
    if gx is None:
        return x
    history = [fx]
    alpha = 1.0 / max(1.0, float(np.max(np.abs(gx))))
    for _ in range(max_iter):
        if np.max(np.abs(np.clip(x - gx, 0.0, 1.0) - x)) <= tol:
            break
        d = np.clip(x - alpha * gx, 0.0, 1.0) - x
        slope = gx @ d
        f_ref = max(history[-memory:])
        t = 1.0
        while True:
            xn = x + t * d
            fn = merit(xn)
            if fn <= f_ref + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                return x
        gn = merit.gradient(xn, fn)
        if gn is None:
            return xn
        s = xn - x
        yv = gn - gx
        sy = s @ yv
        alpha = float(np.clip(s @ s / sy, 1e-10, 1e10)) if sy > 0 else 1.0
        x, fx, gx = xn, fn, gn
        history.append(fx)
        if np.max(np.abs(s)) <= tol:
            break
        # stalled: no progress beyond noise over a full memory window
        if len(history) > memory and min(history[-memory:]) > min(history[:-memory]) - 1e-9 * (1 + abs(fx)):
            break
    return x


def _restore(merit, anchor, target, steps=40):
    """Feasible point furthest along the segment anchor -> target."""
    ev = merit.evaluation(target)
    if ev.feasible:
        return ev
    lo, hi = 0.0, 1.0
    best = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ev = merit.evaluation(np.clip(anchor + mid * (target - anchor), 0.0, 1.0))
        if ev.feasible:
            lo, best = mid, ev
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return best


def _polish(problem, seed: Evaluation, deadline=None):
    scale = max(1.0, abs(seed.objective))
    merit = _Merit(problem, scale)
    n_con = seed.constraints.size - 1
    merit.lam = np.zeros(n_con)
    anchor = np.array(seed.beta)
    best = seed
    x = anchor.copy()
    prev_viol = np.inf
    for _ in range(MAX_OUTER):
        _check_deadline(deadline)
        x_new = _projected_gradient(merit, x)
        ev = merit.evaluation(x_new)
        if not ev.state.converged:
            break
        cand = ev if ev.feasible else _restore(merit, np.array(best.beta), x_new)
        if cand is not None and cand.objective > best.objective:
            best = cand
        g = ev.constraints[:-1]
        viol = ev.max_violation
        merit.lam = np.maximum(0.0, merit.lam + merit.rho * g)
        moved = np.max(np.abs(x_new - x)) if x_new.size else 0.0
        x = x_new
        if viol <= CONSTRAINT_TOL and moved <= 1e-10:
            break
        if viol > 0.25 * prev_viol:
            merit.rho *= PENALTY_GROWTH
        prev_viol = viol
    return best, merit.calls


def solve_opf(problem: OpfProblem, deadline=None) -> OpfSolution:
    """Maximise the net benefit over ``beta`` in [0, 1]^n_ws.

    Returns the best feasible point found; ``status`` is ``infeasible`` when
    neither the seed grid nor the polish finds one (``beta`` is then 0).
    ``deadline`` (anything with ``expired()``) is polled between grid blocks
    and outer iterations; on expiry :class:`DeadlineExceeded` is raised.
    """
    n = problem.net.n_ws
    if n == 0:
        ev = evaluate(problem, np.zeros(0))
        return _solution(ev, OPTIMAL if ev.feasible else INFEASIBLE, 1)

    seed, count = _grid_search(problem, GRID_STEP, deadline)
    if seed is None:
        ev = evaluate(problem, np.zeros(n))
        return _solution(ev, INFEASIBLE, count + 1)
    if not any(problem.wind_available):
        return _solution(seed, OPTIMAL, count)

    best, calls = _polish(problem, seed, deadline)
    return _solution(best, OPTIMAL, count + calls)


def binding_constraints(problem: OpfProblem, solution: OpfSolution, tol: float = 1e-4) -> list[str]:
    """Labels of constraints within ``tol`` of their limit at a solution."""
    if solution.state is None:
        return []
    ev = evaluate(problem, solution.beta)
    labels = constraint_labels(problem.net)
    return [lab for lab, g in zip(labels, ev.constraints) if np.isfinite(g) and g >= -tol]


def losses_by_branch(problem: OpfProblem, solution: OpfSolution) -> np.ndarray:
    return branch_losses(problem.net, solution.state)
