"""Per-round control of update probabilities and compression ratios.

The coordinator minimises, for the current edge round,

    sum_n (2 - theta_n) rho_n (sigma2 + G2) + 3 (1 - rho_n)^2 G2

subject to the extrapolated time and energy budgets, by alternating between
a linear program in theta (rho fixed) and a separable quadratic program in
rho (theta fixed). Alternation alone stalls wherever the energy cap binds,
because neither block can move without the other giving energy back, so a
second run is seeded from an energy-multiplier decomposition.

With the max-form time constraint expanded, every device faces its own cap
rho tau mu + theta nu <= cap_i, so only the energy constraint couples
devices. The theta step is then a fractional knapsack (solved greedily,
which is exact for one coupling constraint) and the rho step a separable
QP with one linear constraint (solved through its KKT multiplier).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cost import Projection
from .model_core import Batch, stochastic_gradient

log = logging.getLogger(__name__)

RHO_MIN = 1e-3
THETA_MIN = 1e-3
# relative round-off allowed when a bound meets a cap exactly
_SLACK = 1e-9


def estimate_sigma_g(data, model, lm, batch_size: int, n_probes: int, rng, grad_fn=None):
    """Device-side estimate of gradient noise and gradient magnitude.

    Draws ``n_probes`` mini-batches (each uniform without replacement) and
    returns (sigma2, G2): sigma2 is the unbiased sample variance of the probe
    gradients with norms summed over coordinates, and G2 is the mean squared
    probe-gradient norm. When the local set holds no more than one batch the
    full gradient is used, so sigma2 = 0 and G2 = ||grad F_n||^2.
    """
    if n_probes < 2:
        raise ValueError("n_probes must be >= 2")
    grad_fn = grad_fn or stochastic_gradient
    n = len(data.labels)
    if n <= batch_size:
        g = grad_fn(model, Batch(data.features, data.labels), lm)
        return 0.0, float(g @ g)
    grads = np.empty((n_probes, model.shape[0]))
    for k in range(n_probes):
        idx = rng.choice(n, size=batch_size, replace=False)
        grads[k] = grad_fn(model, Batch(data.features[idx], data.labels[idx]), lm)
    mean = grads.mean(axis=0)
    sigma2 = float(((grads - mean) ** 2).sum() / (n_probes - 1))
    G2 = float((grads**2).sum(axis=1).mean())
    return sigma2, G2


@dataclass(frozen=True)
class ControlParams:
    sigma2: float
    G2: float
    proj: Projection
    rho_min: float = RHO_MIN
    theta_min: float = THETA_MIN

    def __post_init__(self):
        if self.sigma2 < 0 or self.G2 < 0:
            raise ValueError("sigma2 and G2 must be >= 0")

    @classmethod
    def from_devices(cls, sigma2_n, G2_n, proj: Projection, **kw) -> "ControlParams":
        """Average the per-device uploads into the coordinator's estimates."""
        return cls(float(np.mean(sigma2_n)), float(np.mean(G2_n)), proj, **kw)

    @property
    def n(self) -> int:
        return self.proj.n


@dataclass
class ControlDecision:
    rho: np.ndarray
    theta: np.ndarray
    objective: float
    feasible: bool
    iterations: int = 0
    history: list = field(default_factory=list)


def p2_objective(params: ControlParams, rho, theta) -> float:
    rho = np.asarray(rho)
    theta = np.asarray(theta)
    s, G2 = params.sigma2, params.G2
    return float(np.sum((2 - theta) * rho * (s + G2) + 3 * (1 - rho) ** 2 * G2))


def solve_p21(params: ControlParams, rho) -> tuple[np.ndarray, bool]:
    """Compression ratios maximising sum(rho * theta) under the budgets.

    Returns (theta, feasible); when even theta_min violates a constraint the
    result is theta_min everywhere with feasible False.
    """
    pr, tmin = params.proj, params.theta_min
    rho = np.asarray(rho, dtype=float)
    floor = np.full(params.n, tmin)
    ub = np.minimum(1.0, (pr.device_time_caps - rho * pr.tau * pr.mu) / pr.nu)
    cost = pr.p * pr.nu
    room = pr.energy_cap - float(np.sum(rho * pr.tau * pr.alpha)) - float(cost @ floor)
    if np.any(ub < tmin - _SLACK) or room < -_SLACK * max(1.0, abs(pr.energy_cap)):
        return floor, False
    ub, room = np.maximum(ub, tmin), max(room, 0.0)
    theta = floor.copy()
    free = cost == 0
    theta[free] = ub[free]
    # fractional knapsack: value rho per unit theta, weight p * nu
    ratio = np.where(free, np.inf, rho / np.where(free, 1.0, cost))
    for n in np.lexsort((np.arange(params.n), -ratio)):
        if free[n] or room <= 0:
            continue
        step = min(ub[n] - tmin, room / cost[n])
        theta[n] = tmin + step
        room -= step * cost[n]
    return theta, True


def solve_p22(params: ControlParams, theta, tol: float = 1e-13) -> tuple[np.ndarray, bool]:
    """Update probabilities minimising sum(3 G2 rho^2 + C rho) under the budgets.

    C_n = (2 - theta_n) sigma2 - (4 + theta_n) G2. Returns (rho, feasible);
    infeasible at rho_min gives rho_min everywhere with feasible False.
    """
    if params.G2 <= 0:
        raise ValueError("G2 must be > 0 to solve for rho")
    pr, rmin = params.proj, params.rho_min
    theta = np.asarray(theta, dtype=float)
    floor = np.full(params.n, rmin)
    ub = np.minimum(1.0, (pr.device_time_caps - theta * pr.nu) / (pr.tau * pr.mu))
    w = pr.tau * pr.alpha
    room = pr.energy_cap - float(np.sum(pr.p * theta * pr.nu))
    if np.any(ub < rmin - _SLACK) or float(w @ floor) > room + _SLACK * max(1.0, abs(pr.energy_cap)):
        return floor, False
    ub, room = np.maximum(ub, rmin), max(room, float(w @ floor))

    C = (2 - theta) * params.sigma2 - (4 + theta) * params.G2
    a = 6 * params.G2

    def rho_at(lam):
        return np.clip((-C - lam * w) / a, rmin, ub)

    rho = rho_at(0.0)
    if float(w @ rho) <= room:
        return rho, True
    lo, hi = 0.0, float(np.max((-C - a * rmin) / w))
    hi = max(hi, 1.0)
    while float(w @ rho_at(hi)) > room:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(w @ rho_at(mid)) > room:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return rho_at(hi), True


def _pass_loop(params, rho, theta, eps, i_max):
    history = []
    it = 0
    while True:
        z_prev = np.concatenate([rho, theta])
        theta, _ = solve_p21(params, rho)
        rho, _ = solve_p22(params, theta)
        it += 1
        history.append(p2_objective(params, rho, theta))
        if np.linalg.norm(np.concatenate([rho, theta]) - z_prev) <= eps or it >= i_max:
            break
    return ControlDecision(rho, theta, history[-1], params.proj.feasible(rho, theta), it, history)


def _lagrangian_point(params: ControlParams, lam: float):
    """Per-device exact minimiser of objective + lam * energy under the time caps.

    For fixed rho the function is linear in theta, so theta sits at theta_min
    or at its time-cap bound. Each of the resulting branches is a convex
    quadratic in rho on at most two intervals; evaluating every clipped
    vertex and interval end on both branches gives the exact minimum.
    """
    pr = params.proj
    s, G2 = params.sigma2 + params.G2, params.G2
    rmin, tmin = params.rho_min, params.theta_min
    a, b, c = pr.tau * pr.mu, pr.nu, pr.device_time_caps
    w, v = pr.tau * pr.alpha, pr.p * pr.nu
    rho_hi = np.clip((c - tmin * b) / a, rmin, 1.0)
    knee = np.clip((c - b) / a, rmin, rho_hi)  # theta's cap drops below 1 past here

    def f(r, t):
        return (2 - t) * r * s + 3 * G2 * (1 - r) ** 2 + lam * (r * w + t * v)

    def tbar(r):
        return np.clip((c - r * a) / b, tmin, 1.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        at_floor = 1 - ((2 - tmin) * s + lam * w) / (6 * G2)
        at_one = 1 - (s + lam * w) / (6 * G2)
        on_cap = (6 * G2 - 2 * s + s * c / b - lam * w + lam * v * a / b) / (2 * s * a / b + 6 * G2)
    cands = [
        np.full_like(a, rmin),
        rho_hi,
        knee,
        np.clip(np.nan_to_num(at_floor, nan=rmin), rmin, rho_hi),
        np.clip(np.nan_to_num(at_one, nan=rmin), rmin, knee),
        np.clip(np.nan_to_num(on_cap, nan=rmin), knee, rho_hi),
    ]
    best = np.full_like(a, np.inf)
    rho, theta = np.full_like(a, rmin), np.full_like(a, tmin)
    for r in cands:
        for t in (np.full_like(a, tmin), tbar(r)):
            val = f(r, t)
            better = val < best
            best = np.where(better, val, best)
            rho = np.where(better, r, rho)
            theta = np.where(better, t, theta)
    return rho, theta


def _device_polygon_min(params: ControlParams, n: int, e_cap: float):
    """Exact minimum of device n's objective term under its time cap and ``e_cap``.

    The term is bilinear-plus-convex with an indefinite Hessian, so its
    minimum over the polygon lies on the boundary: the vertices, or the
    vertex of the quadratic restricted to an edge.
    """
    pr = params.proj
    s, G2 = params.sigma2 + params.G2, params.G2
    rmin, tmin = params.rho_min, params.theta_min
    lines = [
        (1.0, 0.0, rmin), (1.0, 0.0, 1.0), (0.0, 1.0, tmin), (0.0, 1.0, 1.0),
        (pr.tau * pr.mu[n], pr.nu[n], pr.device_time_caps[n]),
        (pr.tau * pr.alpha[n], pr.p[n] * pr.nu[n], e_cap),
    ]

    def inside(z):
        if z[0] < rmin - 1e-12 or z[1] < tmin - 1e-12:
            return False
        upper = (lines[1], lines[3], lines[4], lines[5])
        return all(A * z[0] + B * z[1] <= C + 1e-9 * max(1.0, abs(C)) for A, B, C in upper)

    def f(z):
        return (2 - z[1]) * z[0] * s + 3 * G2 * (1 - z[0]) ** 2

    verts = []
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            M = np.array([lines[i][:2], lines[j][:2]])
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            z = np.linalg.solve(M, [lines[i][2], lines[j][2]])
            if inside(z):
                verts.append((z, i, j))
    if not verts:
        return None
    best = min((z for z, _, _ in verts), key=f)
    for k in range(len(lines)):
        on = sorted((tuple(z) for z, i, j in verts if k in (i, j)))
        if len(on) < 2:
            continue
        P, Q = np.array(on[0]), np.array(on[-1])
        f0, fh, f1 = f(P), f(0.5 * (P + Q)), f(Q)
        curv = 2 * (f0 + f1 - 2 * fh)
        if curv > 1e-15:
            z = P + np.clip(-(f1 - f0 - curv) / (2 * curv), 0, 1) * (Q - P)
            if f(z) < f(best):
                best = z
    return np.clip(best, [rmin, tmin], 1.0)


def lagrangian_start(params: ControlParams, tol: float = 1e-13):
    """Starting point from pricing energy with a single multiplier.

    Bisects the multiplier until the per-device minimisers fit the energy
    cap, then spends the leftover energy on the devices whose minimiser
    jumps at the final multiplier, each re-solved exactly under its share.
    Returns (rho, theta) satisfying the time caps and the energy cap.
    """
    pr = params.proj
    cap = pr.energy_cap

    def at(lam):
        r, t = _lagrangian_point(params, lam)
        return pr.device_energy(r, t), r, t

    e, rho, theta = at(0.0)
    if e.sum() <= cap:
        return rho, theta
    lo, hi = 0.0, 1.0
    while at(hi)[0].sum() > cap:
        hi *= 2
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if at(mid)[0].sum() > cap:
            lo = mid
        else:
            hi = mid
    e, rho, theta = at(hi)
    e_lo = at(lo)[0]
    spare = cap - e.sum()
    for n in np.argsort(-(e_lo - e), kind="stable"):
        if spare <= 0 or e_lo[n] <= e[n]:
            break
        z = _device_polygon_min(params, n, e[n] + min(spare, e_lo[n] - e[n]))
        if z is None:
            continue
        used = pr.device_energy(z[0], z[1])[n]
        spare -= used - e[n]
        rho[n], theta[n] = z
        e[n] = used
    return rho, theta


def alternating_solve(
    params: ControlParams,
    eps: float = 1e-4,
    i_max: int = 50,
    rho0=None,
    theta0=None,
    multi_start: bool = True,
) -> ControlDecision:
    """Alternate the theta LP and the rho QP until the iterate settles.

    Each run performs at least one (theta, rho) pass and stops once the
    joint iterate moves by at most ``eps`` or ``i_max`` passes are done.
    The first run starts from (rho0, theta0), default all ones. With
    ``multi_start`` a second run starts from :func:`lagrangian_start`, which
    escapes the stalls alternation suffers when the energy cap binds, and
    the lower-objective run is returned with its own history.
    """
    if eps <= 0 or i_max < 1:
        raise ValueError("need eps > 0 and i_max >= 1")
    if params.G2 <= 0:
        raise ValueError("G2 must be > 0 to solve for rho")
    n = params.n
    rmin, tmin = params.rho_min, params.theta_min
    if not params.proj.feasible(np.full(n, rmin), np.full(n, tmin)):
        rho, theta = np.full(n, rmin), np.full(n, tmin)
        return ControlDecision(rho, theta, p2_objective(params, rho, theta), False, 0)

    rho = np.ones(n) if rho0 is None else np.asarray(rho0, dtype=float).copy()
    theta = np.ones(n) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    best = _pass_loop(params, rho, theta, eps, i_max)
    if multi_start:
        other = _pass_loop(params, *lagrangian_start(params), eps, i_max)
        if other.feasible and (not best.feasible or other.objective < best.objective):
            best = other
    return best


def baseline_policy(scheme: str, params: ControlParams) -> ControlDecision:
    """Decision of a comparison scheme for the current round."""
    n = params.n
    ones = np.ones(n)
    if scheme == "CEF":
        rho, theta = ones, ones.copy()
    elif scheme == "CEF-F":
        theta = ones
        rho, ok = solve_p22(params, theta)
        return ControlDecision(rho, theta, p2_objective(params, rho, theta), ok, 1)
    elif scheme == "CEF-C":
        rho = ones
        theta, ok = solve_p21(params, rho)
        return ControlDecision(rho, theta, p2_objective(params, rho, theta), ok, 1)
    elif scheme == "MLL-SGD":
        inv = 1.0 / params.proj.alpha
        rho, theta = inv / inv.sum(), ones
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    feasible = params.proj.feasible(rho, theta)
    return ControlDecision(rho, theta, p2_objective(params, rho, theta), feasible, 0)


def decide(scheme: str, params: ControlParams, eps=1e-4, i_max=50, warm=None) -> ControlDecision:
    if scheme == "HCEF":
        rho0, theta0 = warm if warm is not None else (None, None)
        return alternating_solve(params, eps, i_max, rho0, theta0)
    return baseline_policy(scheme, params)
