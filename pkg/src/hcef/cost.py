"""Time and energy models, device-state sampling and budget accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_BASE_STREAM = 11
_ROUND_STREAM = 12


@dataclass(frozen=True)
class DeviceState:
    mu: float  # seconds per local iteration
    nu: float  # seconds to upload one full model
    alpha: float  # joules per mini-batch SGD step
    p: float  # transmit power, watts
    sigma2_hat: float = 0.0
    G2_hat: float = 0.0

    def __post_init__(self):
        if not (self.mu > 0 and self.nu > 0 and self.alpha > 0):
            raise ValueError("mu, nu and alpha must be > 0")
        if self.p < 0 or self.sigma2_hat < 0 or self.G2_hat < 0:
            raise ValueError("p, sigma2_hat and G2_hat must be >= 0")


def _range(name, pair):
    lo, hi = pair
    if not 0 < lo < hi:
        raise ValueError(f"{name} must satisfy 0 < lo < hi, got {pair}")
    return float(lo), float(hi)


@dataclass(frozen=True)
class HeterogeneityProfile:
    """Ranges for device capabilities.

    CPU frequency drives both computing time (proportional to 1/f) and
    computing energy (proportional to f^2); with the defaults this maps
    1-2 GHz onto mu in [75, 150] s and alpha in [1.5, 6.0] J. Every device
    keeps a persistent base frequency, bandwidth and power; frequency and
    bandwidth fluctuate by up to ``jitter`` (relative) every edge round.
    """

    cpu_freq_ghz: tuple = (1.0, 2.0)
    mu_s: tuple = (75.0, 150.0)
    alpha_j: tuple = (1.5, 6.0)
    bandwidth_mbps: tuple = (1.0, 5.0)
    power_w: tuple = (0.1, 1.0)
    backhaul_mbps: float = 50.0
    jitter: float = 0.1
    bits_per_param: int = 32
    comm_params: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("cpu_freq_ghz", "mu_s", "alpha_j", "bandwidth_mbps", "power_w"):
            object.__setattr__(self, name, _range(name, getattr(self, name)))
        if self.backhaul_mbps <= 0:
            raise ValueError("backhaul_mbps must be > 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        if self.bits_per_param < 1:
            raise ValueError("bits_per_param must be >= 1")
        if self.comm_params is not None and self.comm_params < 1:
            raise ValueError("comm_params must be >= 1")

    def model_bits(self, n_params: int) -> float:
        return float((self.comm_params or n_params) * self.bits_per_param)

    def backhaul_time(self, n_params: int) -> float:
        """Seconds to ship one dense model across a backhaul link."""
        return self.model_bits(n_params) / (self.backhaul_mbps * 1e6)


def sample_device_state(
    profile: HeterogeneityProfile, device: int, l: int, r: int, n_params: int
) -> DeviceState:
    """Cost fields of ``device`` at edge round (l, r); deterministic in its keys."""
    f_lo, f_hi = profile.cpu_freq_ghz
    b_lo, b_hi = profile.bandwidth_mbps
    base = np.random.default_rng([profile.seed, _BASE_STREAM, device])
    f0 = base.uniform(f_lo, f_hi)
    bw0 = base.uniform(b_lo, b_hi)
    p = base.uniform(*profile.power_w)
    j = profile.jitter
    rnd = np.random.default_rng([profile.seed, _ROUND_STREAM, device, l, r])
    f = float(np.clip(f0 * (1 + rnd.uniform(-j, j)), f_lo, f_hi))
    bw = float(np.clip(bw0 * (1 + rnd.uniform(-j, j)), b_lo, b_hi))

    mu_lo, mu_hi = profile.mu_s
    a_lo, a_hi = profile.alpha_j
    mu = mu_lo + (mu_hi - mu_lo) * (1 / f - 1 / f_hi) / (1 / f_lo - 1 / f_hi)
    alpha = a_lo + (a_hi - a_lo) * (f * f - f_lo * f_lo) / (f_hi * f_hi - f_lo * f_lo)
    nu = profile.model_bits(n_params) / (bw * 1e6)
    return DeviceState(mu=mu, nu=nu, alpha=alpha, p=p)


def _arrays(states):
    mu = np.array([s.mu for s in states])
    nu = np.array([s.nu for s in states])
    alpha = np.array([s.alpha for s in states])
    p = np.array([s.p for s in states])
    return mu, nu, alpha, p


def round_time(states, rho, theta, tau: int, backhaul: float = 0.0) -> float:
    """Intra-cluster round time max_n(rho tau mu + theta nu), plus ``backhaul``.

    Pass the slowest backhaul link time when the round closes a global round.
    """
    if len(states) == 0:
        raise ValueError("empty cluster")
    mu, nu, _, _ = _arrays(states)
    return float(np.max(np.asarray(rho) * tau * mu + np.asarray(theta) * nu)) + backhaul


def round_energy(states, rho, theta, tau: int) -> float:
    """Energy of one edge round over all devices: sum(rho tau alpha + p theta nu)."""
    _, nu, alpha, p = _arrays(states)
    return float(np.sum(np.asarray(rho) * tau * alpha + p * np.asarray(theta) * nu))


@dataclass
class BudgetLedger:
    """Running account of simulated time and energy against the budgets."""

    T_budget: float
    E_budget: float
    m: int
    past_time: float = 0.0
    past_energy: float = 0.0
    cluster_partial: np.ndarray = None
    round_energy_partial: float = 0.0
    global_round_times: list = field(default_factory=list)
    global_round_energies: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.T_budget > 0 and self.E_budget > 0):
            raise ValueError("budgets must be > 0")
        if self.cluster_partial is None:
            self.cluster_partial = np.zeros(self.m)

    @property
    def elapsed_time(self) -> float:
        return self.past_time + float(self.cluster_partial.max())

    @property
    def consumed_energy(self) -> float:
        return self.past_energy + self.round_energy_partial

    def time_after(self, cluster_times, backhaul=None) -> float:
        """Elapsed time if an edge round with ``cluster_times`` ran next."""
        part = self.cluster_partial + np.asarray(cluster_times)
        if backhaul is not None:
            part = part + np.asarray(backhaul)
        return self.past_time + float(part.max())

    def record_edge_round(self, cluster_times, energy: float) -> None:
        ct = np.asarray(cluster_times, dtype=float)
        if ct.shape != (self.m,) or np.any(ct < 0) or energy < 0:
            raise ValueError("bad edge-round record")
        self.cluster_partial = self.cluster_partial + ct
        self.round_energy_partial += energy

    def close_global_round(self, backhaul=None) -> float:
        """Fold the current global round into the history; return its time."""
        part = self.cluster_partial
        if backhaul is not None:
            part = part + np.asarray(backhaul)
        T = float(part.max())
        self.past_time += T
        self.past_energy += self.round_energy_partial
        self.global_round_times.append(T)
        self.global_round_energies.append(self.round_energy_partial)
        self.cluster_partial = np.zeros(self.m)
        self.round_energy_partial = 0.0
        return T


@dataclass(frozen=True)
class Projection:
    """Extrapolated time/energy constraints of the one-slot problem at (l, r).

    The time constraint is separable per cluster: every device of cluster i
    must satisfy rho tau mu + theta nu <= ``time_caps[i]``. The energy
    constraint couples all devices: sum(rho tau alpha + p theta nu) <=
    ``energy_cap``.
    """

    tau: int
    mu: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    p: np.ndarray
    cluster: np.ndarray
    phi_rem: int
    q_rem: int
    hist_time: np.ndarray
    backhaul: np.ndarray
    past_time: float
    hist_energy: float
    past_energy: float
    T_budget: float
    E_budget: float

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def time_caps(self) -> np.ndarray:
        per_round = (self.T_budget - self.past_time) / self.phi_rem
        return (per_round - self.hist_time - self.backhaul) / self.q_rem

    @property
    def device_time_caps(self) -> np.ndarray:
        return self.time_caps[self.cluster]

    @property
    def energy_cap(self) -> float:
        return ((self.E_budget - self.past_energy) / self.phi_rem - self.hist_energy) / self.q_rem

    def device_time(self, rho, theta) -> np.ndarray:
        return np.asarray(rho) * self.tau * self.mu + np.asarray(theta) * self.nu

    def device_energy(self, rho, theta) -> np.ndarray:
        return np.asarray(rho) * self.tau * self.alpha + self.p * np.asarray(theta) * self.nu

    def time_lhs(self, rho, theta) -> float:
        dt = self.device_time(rho, theta)
        m = len(self.hist_time)
        worst = np.full(m, -np.inf)
        np.maximum.at(worst, self.cluster, dt)
        inner = self.q_rem * worst + self.hist_time + self.backhaul
        return self.phi_rem * float(inner[np.isfinite(worst)].max()) + self.past_time

    def energy_lhs(self, rho, theta) -> float:
        step = self.q_rem * float(self.device_energy(rho, theta).sum()) + self.hist_energy
        return self.phi_rem * step + self.past_energy

    def feasible(self, rho, theta, rtol: float = 1e-9) -> bool:
        return bool(
            self.time_lhs(rho, theta) <= self.T_budget * (1 + rtol) + rtol
            and self.energy_lhs(rho, theta) <= self.E_budget * (1 + rtol) + rtol
        )


def project_constraints(
    ledger: BudgetLedger, l: int, r: int, phi: int, q: int, tau: int, states, cluster, backhaul
) -> Projection:
    """Build the extrapolated constraints for the decision at edge round (l, r).

    ``backhaul[i]`` is the slowest backhaul link time of cluster i in global
    round l (zero for an isolated cluster).
    """
    if not (0 <= l < phi and 0 <= r < q):
        raise ValueError("need 0 <= l < phi and 0 <= r < q")
    mu, nu, alpha, p = _arrays(states)
    return Projection(
        tau=tau,
        mu=mu,
        nu=nu,
        alpha=alpha,
        p=p,
        cluster=np.asarray(cluster, dtype=np.int64),
        phi_rem=phi - l,
        q_rem=q - r,
        hist_time=ledger.cluster_partial.copy(),
        backhaul=np.asarray(backhaul, dtype=float),
        past_time=ledger.past_time,
        hist_energy=ledger.round_energy_partial,
        past_energy=ledger.past_energy,
        T_budget=ledger.T_budget,
        E_budget=ledger.E_budget,
    )
