"""Newton-Raphson AC power flow in rectangular voltage coordinates.

The state vector is ``x = [e_pq, f_pq]`` (real and imaginary voltage parts of
the PQ buses); the slack bus is pinned at ``e = 1, f = 0``. Every solve
starts flat, so results never depend on solve order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numba import njit

from rtopf.grid import AdmittanceMatrix, Network

TOLERANCE = 1e-8
MAX_ITER = 50
POLISH_TOL = 1e-12


@dataclass(frozen=True)
class InjectionSet:
    """Net specified injections per bus (p.u.); entry 0 (slack) is ignored."""

    p_inj: np.ndarray
    q_inj: np.ndarray


@dataclass(frozen=True)
class PowerFlowState:
    e: np.ndarray
    f: np.ndarray
    p_slack: float
    q_slack: float
    converged: bool
    iterations: int
    max_mismatch: float
    inj: InjectionSet

    @property
    def vm(self) -> np.ndarray:
        return np.hypot(self.e, self.f)

    @property
    def voltage(self) -> np.ndarray:
        return self.e + 1j * self.f


def make_injections(net: Network, wind_injected=None) -> InjectionSet:
    """Combine demand with injected wind power (p.u., one value per WS)."""
    p = -net.p_demand
    q = -net.q_demand
    if wind_injected is not None and net.n_ws:
        np.add.at(p, net.ws_buses, np.asarray(wind_injected, dtype=float))
    p[0] = 0.0
    q[0] = 0.0
    return InjectionSet(p_inj=p, q_inj=q)


def bus_power(y: AdmittanceMatrix, e, f) -> np.ndarray:
    """Complex power injected at every bus for voltage ``e + jf``."""
    v = np.asarray(e) + 1j * np.asarray(f)
    return v * np.conj(y.y @ v)


def mismatch(y: AdmittanceMatrix, inj: InjectionSet, e, f) -> np.ndarray:
    """Stacked [dP_pq, dQ_pq] residual of the power-flow equations."""
    s = bus_power(y, e, f)
    return np.concatenate([s.real[1:] - inj.p_inj[1:], s.imag[1:] - inj.q_inj[1:]])


@njit(cache=True)
def _currents_conj(ybus, v):
    n = v.size
    out = np.empty(n, dtype=np.complex128)
    for i in range(n):
        acc = 0j
        for k in range(n):
            acc += ybus[i, k] * v[k]
        out[i] = np.conj(acc)
    return out


@njit(cache=True)
def _jacobian(ybus, v, i_conj):
    # dS_i/de_k = V_i conj(Y_ik) + delta_ik conj(I_i)
    # dS_i/df_k = -j V_i conj(Y_ik) + j delta_ik conj(I_i)
    m = v.size - 1
    jac = np.empty((2 * m, 2 * m))
    for r in range(m):
        i = r + 1
        for c in range(m):
            k = c + 1
            t = v[i] * np.conj(ybus[i, k])
            ds_de = t
            ds_df = -1j * t
            if i == k:
                ds_de += i_conj[i]
                ds_df += 1j * i_conj[i]
            jac[r, c] = ds_de.real
            jac[r, m + c] = ds_df.real
            jac[m + r, c] = ds_de.imag
            jac[m + r, m + c] = ds_df.imag
    return jac


@njit(cache=True)
def _newton(ybus, target, tol, max_iter, polish_tol):
    n = ybus.shape[0]
    m = n - 1
    v = np.ones(n, dtype=np.complex128)
    worst = np.inf
    converged = False
    polished = False
    it = 0
    rhs = np.empty(2 * m)
    for it in range(1, max_iter + 1):
        i_conj = _currents_conj(ybus, v)
        worst = 0.0
        for r in range(m):
            ds = v[r + 1] * i_conj[r + 1] - target[r]
            rhs[r] = -ds.real
            rhs[m + r] = -ds.imag
            worst = max(worst, abs(ds.real), abs(ds.imag))
        if not np.isfinite(worst):
            converged = False
            break
        converged = worst <= tol
        if converged:
            # one extra step once inside tol drives the residual to round-off
            if worst <= polish_tol or polished:
                break
            polished = True
        if it == max_iter:
            break
        jac = _jacobian(ybus, v, i_conj)
        try:
            dx = np.linalg.solve(jac, rhs)
        except Exception:
            break
        for r in range(m):
            v[r + 1] += dx[r] + 1j * dx[m + r]
    s0 = v[0] * _currents_conj(ybus, v)[0]
    return v, it, worst, converged, s0


def jacobian(y: AdmittanceMatrix, e, f) -> np.ndarray:
    """Analytic Jacobian of :func:`mismatch` with respect to ``[e_pq, f_pq]``."""
    v = np.asarray(e, dtype=float) + 1j * np.asarray(f, dtype=float)
    return _jacobian(y.y, v, _currents_conj(y.y, v))


def solve_powerflow(net: Network, y: AdmittanceMatrix, inj: InjectionSet,
                    tol: float = TOLERANCE, max_iter: int = MAX_ITER) -> PowerFlowState:
    """Solve g(x) = 0 from a flat start.

    ``iterations`` counts mismatch evaluations, so an exact flat start reports
    one. After the residual first drops below ``tol`` one more Newton step is
    taken (unless it is already below ``POLISH_TOL``) so that derived
    quantities such as branch-sum losses agree with the balance to round-off. Non-convergence (iteration cap, singular Jacobian, overflow) is
    returned with ``converged=False`` rather than raised.
    """
    target = np.ascontiguousarray(inj.p_inj[1:] + 1j * inj.q_inj[1:])
    v, it, worst, converged, s0 = _newton(y.y, target, tol, max_iter, POLISH_TOL)
    return PowerFlowState(e=v.real.copy(), f=v.imag.copy(), p_slack=float(s0.real),
                          q_slack=float(s0.imag), converged=bool(converged),
                          iterations=int(it), max_mismatch=float(worst), inj=inj)


def _require_converged(state):
    if not state.converged:
        raise ValueError("power-flow state did not converge")


def branch_power(net: Network, state: PowerFlowState) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from- and to-end."""
    arr = net.branch_arrays
    v = state.voltage
    vi, vj = v[arr["from"]], v[arr["to"]]
    ys, sh = arr["ys"], arr["half_shunt"]
    s_from = vi * np.conj(ys * (vi - vj) + sh * vi)
    s_to = vj * np.conj(ys * (vj - vi) + sh * vj)
    return s_from, s_to


def branch_flows(net: Network, state: PowerFlowState) -> np.ndarray:
    """Apparent power per branch, the larger of its two end values."""
    s_from, s_to = branch_power(net, state)
    return np.maximum(np.abs(s_from), np.abs(s_to))


def branch_losses(net: Network, state: PowerFlowState) -> np.ndarray:
    """Active loss of every branch (sum of the powers entering both ends)."""
    _require_converged(state)
    s_from, s_to = branch_power(net, state)
    return (s_from + s_to).real


def total_losses(net: Network, state: PowerFlowState) -> float:
    """Active network loss from the balance P_S + sum(P_wind) - sum(P_d)."""
    _require_converged(state)
    return float(state.p_slack + np.sum(state.inj.p_inj[1:]))


def dump_state_csv(state: PowerFlowState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "e", "f", "vm"])
        for i, (e, f, vm) in enumerate(zip(state.e, state.f, state.vm)):
            w.writerow([i, repr(float(e)), repr(float(f)), repr(float(vm))])
