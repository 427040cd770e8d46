"""Exhaustive grid search over (rho, theta) for small control problems.

The search enumerates every grid pair per device, drops pairs violating the
device's time cap, and combines devices exactly: because the remaining
constraint is a single energy sum, each device's candidates can be reduced
to their (energy, objective) Pareto front without losing the grid optimum.
Fronts of three or more devices are merged pairwise. Meant for N <= 3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import ControlParams


def grid(lo: float, step: float = 0.01) -> np.ndarray:
    """lo, lo + step, ... up to 1, with 1 itself always included."""
    pts = lo + step * np.arange(int(np.floor((1 - lo) / step + 1e-9)) + 1)
    pts = pts[pts <= 1 + 1e-12]
    if pts[-1] < 1 - 1e-12:
        pts = np.append(pts, 1.0)
    return np.minimum(pts, 1.0)


def _pareto(energy, obj, payload):
    """Keep entries not dominated in (lower energy, lower objective)."""
    order = np.lexsort((obj, energy))
    e, o, pl = energy[order], obj[order], payload[order]
    best = np.minimum.accumulate(o)
    keep = np.ones(len(o), dtype=bool)
    keep[1:] = o[1:] < best[:-1]
    return e[keep], o[keep], pl[keep]


@dataclass
class GridResult:
    objective: float
    rho: np.ndarray
    theta: np.ndarray
    feasible: bool


def brute_force(params: ControlParams, step: float = 0.01, rtol: float = 1e-9) -> GridResult:
    pr = params.proj
    s, G2 = params.sigma2, params.G2
    rg = grid(params.rho_min, step)
    tg = grid(params.theta_min, step)
    R, T = np.meshgrid(rg, tg, indexing="ij")
    R, T = R.ravel(), T.ravel()
    obj_pair = (2 - T) * R * (s + G2) + 3 * (1 - R) ** 2 * G2

    per_round = (pr.T_budget - pr.past_time) / pr.phi_rem
    e_cap = ((pr.E_budget - pr.past_energy) / pr.phi_rem - pr.hist_energy) / pr.q_rem
    fronts = []
    for n in range(pr.n):
        i = pr.cluster[n]
        t_cap = (per_round - pr.hist_time[i] - pr.backhaul[i]) / pr.q_rem
        t = R * pr.tau * pr.mu[n] + T * pr.nu[n]
        ok = t <= t_cap + rtol * max(1.0, abs(t_cap))
        if not ok.any():
            return GridResult(np.inf, None, None, False)
        e = R * pr.tau * pr.alpha[n] + pr.p[n] * T * pr.nu[n]
        idx = np.flatnonzero(ok)
        fronts.append(_pareto(e[idx], obj_pair[idx], idx[:, None]))

    e_acc, o_acc, choice = fronts[0]
    for e_n, o_n, c_n in fronts[1:]:
        E = (e_acc[:, None] + e_n[None, :]).ravel()
        O = (o_acc[:, None] + o_n[None, :]).ravel()
        C = np.concatenate(
            [np.repeat(choice, len(c_n), axis=0), np.tile(c_n, (len(choice), 1))], axis=1
        )
        mask = E <= e_cap + rtol * max(1.0, abs(e_cap))
        if not mask.any():
            return GridResult(np.inf, None, None, False)
        e_acc, o_acc, choice = _pareto(E[mask], O[mask], C[mask])

    ok = e_acc <= e_cap + rtol * max(1.0, abs(e_cap))
    if not ok.any():
        return GridResult(np.inf, None, None, False)
    k = np.flatnonzero(ok)[np.argmin(o_acc[ok])]
    pick = choice[k]
    return GridResult(float(o_acc[k]), R[pick], T[pick], True)


def random_instance(rng: np.random.Generator, n: int | None = None) -> ControlParams:
    """A random small control problem with budgets between floor and full cost.

    Device costs follow the default heterogeneity ranges, with upload times
    long enough that compression matters. Budget tightness is drawn so that
    the time cap, the energy cap, both or neither may bind.
    """
    from .cost import BudgetLedger, DeviceState, project_constraints

    n = int(rng.integers(1, 4)) if n is None else n
    m = int(rng.integers(1, n + 1))
    cluster = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    rng.shuffle(cluster)
    tau = int(rng.integers(1, 11))
    states = [
        DeviceState(
            mu=rng.uniform(75, 150),
            nu=rng.uniform(1, 200),
            alpha=rng.uniform(1.5, 6.0),
            p=rng.uniform(0.1, 1.0),
        )
        for _ in range(n)
    ]
    phi, q = int(rng.integers(1, 31)), int(rng.integers(1, 11))
    l, r = int(rng.integers(0, phi)), int(rng.integers(0, q))
    full_t = max(s.mu * tau + s.nu for s in states)
    full_e = sum(s.alpha * tau + s.p * s.nu for s in states)
    hist = rng.uniform(0, r * full_t, size=m)
    backhaul = rng.uniform(0, 2, size=m)
    past_t, past_e = rng.uniform(0, l * q * full_t), rng.uniform(0, l * q * full_e)
    hist_e = rng.uniform(0, r * full_e)
    c_t, c_e = rng.uniform(0.15, 1.2, size=2)
    T = past_t + (phi - l) * (float(np.max(hist + backhaul)) + (q - r) * c_t * full_t)
    E = past_e + (phi - l) * (hist_e + (q - r) * c_e * full_e)
    ledger = BudgetLedger(T, E, m, past_time=past_t, past_energy=past_e,
                          cluster_partial=hist, round_energy_partial=hist_e)
    proj = project_constraints(ledger, l, r, phi, q, tau, states, cluster, backhaul)
    return ControlParams(rng.uniform(0, 3), rng.uniform(0.05, 3), proj)
