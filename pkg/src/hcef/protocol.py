"""Round orchestration: local rounds, aggregation, gossip and budget policy.

One edge round broadcasts each edge model to its devices, collects their
cost and gradient statistics, asks the coordinator for (rho, theta), runs
the probabilistic local iterations, compresses the deltas and aggregates
them per cluster. Every ``q`` edge rounds the edge servers gossip once.

All randomness comes from streams keyed by the master seed and the
position of the draw, so a configuration always reproduces the same trace.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import SCHEMES
from .compression import SparseDelta, top_k
from .controller import RHO_MIN, THETA_MIN, ControlDecision, ControlParams, decide, estimate_sigma_g
from .cost import (
    BudgetLedger,
    HeterogeneityProfile,
    project_constraints,
    round_energy,
    sample_device_state,
)
from .data import (
    BatchSampler,
    Dataset,
    PartitionSpec,
    apply_feature_shift,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    train_test_split,
)
from .model_core import (
    LossModel,
    accuracy,
    init_model,
    logistic_smoothness,
    loss,
    sgd_step,
    stochastic_gradient,
)
from .topology import (
    ClusterTopology,
    build_complete,
    build_erdos_renyi,
    build_ring,
    even_assignment,
    max_learning_rate,
)

log = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, tag, ...])
DATA_STREAM = 1
SPLIT_STREAM = 2
PARTITION_STREAM = 3
SHIFT_STREAM = 4
INIT_STREAM = 5
SAMPLER_STREAM = 6
BERNOULLI_STREAM = 7
PROBE_STREAM = 8
TOPOLOGY_STREAM = 9

ADAPTIVE = ("HCEF", "CEF-F", "CEF-C")
TOPOLOGIES = ("ring", "complete", "erdos_renyi")


@dataclass
class SimulationConfig:
    """Everything a single simulated run depends on.

    ``lr_override`` lets ``eta`` exceed the step-size bound of the
    convergence analysis (a warning is logged instead of an error); the
    bound is checked at rho = theta = 1.
    """

    T_budget: float
    E_budget: float
    scheme: str = "HCEF"
    phi: int = 30
    q: int = 5
    tau: int = 5
    eta: float = 0.05
    batch_size: int = 50
    n_devices: int = 64
    m: int = 8
    topology: str = "ring"
    p_edge: float = 0.5
    profile: HeterogeneityProfile = field(default_factory=HeterogeneityProfile)
    seed: int = 0
    # data
    n_classes: int = 10
    feature_dim: int = 20
    n_samples: int = 6400
    class_sep: float = 3.0
    beta: float = 1.0
    feature_shift: float = 0.0
    test_fraction: float = 0.1
    dataset_csv: str | None = None
    # model
    model: str = "logistic"
    hidden: int = 0
    L_estimate: float | None = None
    # controller
    n_probes: int = 5
    eps: float = 1e-4
    i_max: int = 50
    warm_start: bool = False
    lr_override: bool = False

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        for name in ("phi", "q", "tau", "batch_size", "n_devices", "m", "n_probes", "i_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_probes < 2:
            raise ValueError("n_probes must be >= 2")
        if self.m > self.n_devices:
            raise ValueError("more clusters than devices")
        if self.topology == "ring" and self.m < 2:
            raise ValueError("a ring needs m >= 2; use 'complete' for a single cluster")
        if not (self.eta > 0 and self.eps > 0):
            raise ValueError("eta and eps must be > 0")
        if not (self.T_budget > 0 and self.E_budget > 0):
            raise ValueError("budgets must be > 0")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class RoundTrace:
    l: int
    r: int
    loss: float
    accuracy: float
    cluster_times: tuple
    cum_time: float
    cum_energy: float
    mean_rho: float
    mean_theta: float
    iterations: int
    feasible: bool
    realized_steps: int
    stopped: bool = False


def local_round(
    sampler: BatchSampler,
    y_edge: np.ndarray,
    rho: float,
    theta: float,
    tau: int,
    eta: float,
    rng: np.random.Generator,
    lm: LossModel,
) -> tuple[SparseDelta, int]:
    """Run ``tau`` probabilistic local iterations from ``y_edge``.

    Each iteration takes an SGD step with probability ``rho`` and is a zero
    step otherwise. Returns the top-k compressed displacement and how many
    steps were actually taken.
    """
    if not (0 < rho <= 1 and 0 < theta <= 1):
        raise ValueError("rho and theta must lie in (0, 1]")
    x = y_edge
    steps = 0
    for _ in range(tau):
        if rng.random() < rho:
            x = sgd_step(x, stochastic_gradient(x, sampler.next(), lm), eta)
            steps += 1
    return top_k(x - y_edge, theta), steps


def intra_cluster_aggregate(y_edge: np.ndarray, deltas: list, n_i: int) -> np.ndarray:
    """y + (1/N_i) * sum of the devices' deltas, summed in list order."""
    if n_i < 1 or len(deltas) != n_i:
        raise ValueError(f"expected {n_i} deltas, got {len(deltas)}")
    acc = np.zeros_like(y_edge)
    for delta in deltas:
        if delta.d != y_edge.shape[0]:
            raise ValueError("delta length does not match the edge model")
        acc[delta.indices] += delta.values
    return y_edge + acc / n_i


def inter_cluster_gossip(edge_models: np.ndarray, H: np.ndarray) -> np.ndarray:
    """One gossip step: row i of the result is sum_j H[j, i] * y_j."""
    Y = np.asarray(edge_models, dtype=float)
    if Y.ndim != 2 or H.shape != (Y.shape[0], Y.shape[0]):
        raise ValueError(f"H of shape {H.shape} does not match {Y.shape[0]} edge models")
    return H.T @ Y


def averaged_model(models, sizes=None) -> np.ndarray:
    """Device average; with ``sizes`` the rows are edge models weighted N_i / N."""
    M = np.asarray(models, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.shape[0] == 0:
        raise ValueError("no models to average")
    if sizes is None:
        return M.mean(axis=0)
    w = np.asarray(sizes, dtype=float)
    if w.shape != (M.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sizes must be non-negative, one per model, not all zero")
    return (w / w.sum()) @ M


def build_topology(cfg: SimulationConfig) -> ClusterTopology:
    if cfg.topology == "ring":
        graph = build_ring(cfg.m)
    elif cfg.topology == "complete":
        graph = build_complete(cfg.m)
    else:
        graph = build_erdos_renyi(cfg.m, cfg.p_edge, seed=hash_seed(cfg.seed, TOPOLOGY_STREAM))
    return ClusterTopology.build(even_assignment(cfg.n_devices, cfg.m), graph)


def hash_seed(seed: int, tag: int) -> int:
    """A plain integer sub-seed, for helpers that take an int seed."""
    return int(np.random.default_rng([seed, tag]).integers(2**31))


def prepare_data(cfg: SimulationConfig) -> tuple[list[Dataset], Dataset]:
    """Build (device shards, held-out test set) for ``cfg``."""
    if cfg.dataset_csv:
        ds = load_csv(cfg.dataset_csv)
    else:
        ds = generate_synthetic(
            cfg.n_classes, cfg.feature_dim, cfg.n_samples, cfg.class_sep, [cfg.seed, DATA_STREAM]
        )
    train, test = train_test_split(ds, cfg.test_fraction, [cfg.seed, SPLIT_STREAM])
    shards = dirichlet_partition(
        train, PartitionSpec(cfg.n_devices, cfg.beta, hash_seed(cfg.seed, PARTITION_STREAM))
    )
    if cfg.feature_shift:
        shards = apply_feature_shift(shards, cfg.feature_shift, [cfg.seed, SHIFT_STREAM])
    return shards, test


class Simulation:
    """A single run of the cooperative training loop under budgets."""

    def __init__(self, cfg: SimulationConfig):
        cfg.validate()
        self.cfg = cfg
        self.topo = build_topology(cfg)
        self.shards, self.test = prepare_data(cfg)
        n_features = self.shards[0].feature_dim
        n_classes = self.test.n_classes
        L = cfg.L_estimate
        if L is None:
            L = logistic_smoothness(np.vstack([s.features for s in self.shards]))
        self.lm = LossModel(cfg.model, n_features, n_classes, cfg.hidden, L)
        self.eta_bound = max_learning_rate(self.topo.zeta, cfg.q, cfg.tau, L, 1.0, 1.0)
        if cfg.eta > self.eta_bound:
            msg = f"eta = {cfg.eta} exceeds the step-size bound {self.eta_bound:.3g}"
            if not cfg.lr_override:
                raise ValueError(msg + " (set lr_override to run anyway)")
            log.warning(msg)
        self.x0 = init_model(self.lm, np.random.default_rng([cfg.seed, INIT_STREAM]))
        self.samplers = [
            BatchSampler(s, cfg.batch_size, np.random.default_rng([cfg.seed, SAMPLER_STREAM, n]))
            for n, s in enumerate(self.shards)
        ]
        neighbours = np.array([len(self.topo.neighbors(i)) > 0 for i in range(self.topo.m)])
        self.backhaul = np.where(neighbours, cfg.profile.backhaul_time(self.lm.dim), 0.0)
        self.edge_models = np.tile(self.x0, (self.topo.m, 1))
        self.initial_loss = loss(self.x0, self.test.as_batch(), self.lm)
        self.initial_accuracy = accuracy(self.x0, self.test.as_batch(), self.lm)

    def evaluate(self) -> tuple[float, float]:
        u = averaged_model(self.edge_models, self.topo.sizes)
        batch = self.test.as_batch()
        return loss(u, batch, self.lm), accuracy(u, batch, self.lm)

    def _estimates(self, l: int, r: int):
        cfg, assign = self.cfg, self.topo.assignment
        s2 = np.empty(cfg.n_devices)
        g2 = np.empty(cfg.n_devices)
        for n, shard in enumerate(self.shards):
            rng = np.random.default_rng([cfg.seed, PROBE_STREAM, n, l, r])
            s2[n], g2[n] = estimate_sigma_g(
                shard, self.edge_models[assign[n]], self.lm, cfg.batch_size, cfg.n_probes, rng
            )
        return s2, g2

    def run(self) -> list[RoundTrace]:
        cfg, topo = self.cfg, self.topo
        assign, sizes = topo.assignment, topo.sizes
        ledger = BudgetLedger(cfg.T_budget, cfg.E_budget, topo.m)
        traces: list[RoundTrace] = []
        warm = None
        N = cfg.n_devices
        for l in range(cfg.phi):
            for r in range(cfg.q):
                closing = r == cfg.q - 1
                states = [
                    sample_device_state(cfg.profile, n, l, r, self.lm.dim) for n in range(N)
                ]
                proj = project_constraints(
                    ledger, l, r, cfg.phi, cfg.q, cfg.tau, states, assign, self.backhaul
                )
                if cfg.scheme in ADAPTIVE:
                    s2, g2 = self._estimates(l, r)
                else:
                    s2, g2 = np.zeros(N), np.ones(N)
                params = ControlParams.from_devices(s2, g2, proj)
                adaptive = cfg.scheme in ADAPTIVE
                if adaptive and not proj.feasible(np.full(N, RHO_MIN), np.full(N, THETA_MIN)):
                    dec = ControlDecision(np.full(N, RHO_MIN), np.full(N, THETA_MIN), 0.0, False)
                else:
                    dec = decide(cfg.scheme, params, cfg.eps, cfg.i_max, warm)
                rho, theta = dec.rho, dec.theta
                # adaptive schemes stop when the projected budget cannot be met;
                # open-loop schemes never consult it, so guard the actual budget
                stop = adaptive and not dec.feasible
                if not stop:
                    t_dev = proj.device_time(rho, theta)
                    ctimes = np.zeros(topo.m)
                    np.maximum.at(ctimes, assign, t_dev)
                    bh = self.backhaul if closing else None
                    e_round = round_energy(states, rho, theta, cfg.tau)
                    if (
                        ledger.time_after(ctimes, bh) > cfg.T_budget
                        or ledger.consumed_energy + e_round > cfg.E_budget
                    ):
                        stop = True
                if stop:
                    rho, theta = np.full(N, RHO_MIN), np.full(N, THETA_MIN)
                if cfg.warm_start and dec.feasible:
                    warm = (dec.rho, dec.theta)

                deltas = [[] for _ in range(topo.m)]
                realized = 0
                for n in range(N):
                    rng = np.random.default_rng([cfg.seed, BERNOULLI_STREAM, n, l, r])
                    delta, steps = local_round(
                        self.samplers[n],
                        self.edge_models[assign[n]],
                        float(rho[n]),
                        float(theta[n]),
                        cfg.tau,
                        cfg.eta,
                        rng,
                        self.lm,
                    )
                    deltas[assign[n]].append(delta)
                    realized += steps
                for i in range(topo.m):
                    self.edge_models[i] = intra_cluster_aggregate(
                        self.edge_models[i], deltas[i], int(sizes[i])
                    )

                t_dev = proj.device_time(rho, theta)
                ctimes = np.zeros(topo.m)
                np.maximum.at(ctimes, assign, t_dev)
                ledger.record_edge_round(ctimes, round_energy(states, rho, theta, cfg.tau))
                if closing:
                    self.edge_models = inter_cluster_gossip(self.edge_models, topo.H)
                    ledger.close_global_round(self.backhaul)
                    ctimes = ctimes + self.backhaul
                lval, acc = self.evaluate()
                traces.append(
                    RoundTrace(
                        l=l,
                        r=r,
                        loss=lval,
                        accuracy=acc,
                        cluster_times=tuple(float(t) for t in ctimes),
                        cum_time=ledger.elapsed_time,
                        cum_energy=ledger.consumed_energy,
                        mean_rho=float(np.mean(rho)),
                        mean_theta=float(np.mean(theta)),
                        iterations=dec.iterations,
                        feasible=bool(dec.feasible) and not stop,
                        realized_steps=realized,
                        stopped=stop,
                    )
                )
                if stop:
                    log.info("budget exhausted at (l=%d, r=%d); stopping", l, r)
                    return traces
        return traces


def run(cfg: SimulationConfig) -> list[RoundTrace]:
    return Simulation(cfg).run()
