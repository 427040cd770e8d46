"""Backhaul graphs, Metropolis mixing matrices and spectral constants."""
from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np


def build_ring(m: int) -> nx.Graph:
    if m < 2:
        raise ValueError("a ring needs m >= 2")
    return nx.cycle_graph(m) if m > 2 else nx.path_graph(2)


def build_complete(m: int) -> nx.Graph:
    if m < 1:
        raise ValueError("m must be >= 1")
    return nx.complete_graph(m)


def erdos_renyi_draw(m: int, p_edge: float, rng: np.random.Generator) -> nx.Graph:
    """One raw G(m, p) draw, with no connectivity check."""
    g = nx.empty_graph(m)
    iu, ju = np.triu_indices(m, k=1)
    keep = rng.random(len(iu)) < p_edge
    g.add_edges_from(zip(iu[keep].tolist(), ju[keep].tolist()))
    return g


def build_erdos_renyi(m: int, p_edge: float, seed: int, max_retries: int = 1000) -> nx.Graph:
    """Connected G(m, p) graph, redrawn with sub-seed ``attempt`` until connected."""
    if not 0 < p_edge <= 1:
        raise ValueError("p_edge must be in (0, 1]")
    if m < 1:
        raise ValueError("m must be >= 1")
    for attempt in range(max_retries):
        g = erdos_renyi_draw(m, p_edge, np.random.default_rng([seed, attempt]))
        if nx.is_connected(g):
            return g
    raise RuntimeError(f"no connected G({m}, {p_edge}) in {max_retries} draws")


def metropolis_mixing(graph: nx.Graph) -> np.ndarray:
    """Metropolis-Hastings weights: 1 / (1 + max(deg_i, deg_j)) on every edge."""
    m = graph.number_of_nodes()
    if m == 0 or not nx.is_connected(graph):
        raise ValueError("mixing matrix needs a connected graph")
    deg = dict(graph.degree())
    H = np.zeros((m, m))
    for i, j in graph.edges():
        if i == j:
            continue
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        H[i, j] = H[j, i] = w
    H[np.diag_indices(m)] = 1.0 - H.sum(axis=1)
    return H


def spectral_gap(H: np.ndarray) -> float:
    """max(|lambda_2|, |lambda_m|) of a symmetric mixing matrix.

    Named after the table entry it reproduces; it is the second-largest
    eigenvalue magnitude, not one minus it. A single node returns 0.
    """
    if H.shape[0] == 1:
        return 0.0
    try:
        lam = np.linalg.eigvalsh(H)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigen-solve failed") from exc
    return float(max(abs(lam[-2]), abs(lam[0])))


def check_mixing(H: np.ndarray, graph: nx.Graph | None = None, tol: float = 1e-12) -> float:
    """Raise ValueError unless ``H`` is a valid mixing matrix; return its zeta."""
    m = H.shape[0]
    if H.shape != (m, m):
        raise ValueError("H must be square")
    if not np.allclose(H, H.T, atol=tol, rtol=0):
        raise ValueError("H is not symmetric")
    if np.any(H < -tol) or np.any(H > 1 + tol):
        raise ValueError("H has entries outside [0, 1]")
    if np.abs(H.sum(axis=1) - 1).max() > tol or np.abs(H.sum(axis=0) - 1).max() > tol:
        raise ValueError("H is not doubly stochastic")
    if graph is not None:
        adj = nx.to_numpy_array(graph, nodelist=range(m)) > 0
        support = (H > 0) & ~np.eye(m, dtype=bool)
        if np.any(support != adj):
            raise ValueError("H support does not match the graph edges")
    zeta = spectral_gap(H)
    if zeta >= 1 - tol:
        raise ValueError(f"zeta = {zeta} is not < 1")
    return zeta


def omega1(zeta: float) -> float:
    """Topology constant 1/(1-z^2) + 2/(1-z) + z/(1-z)^2."""
    if not 0 <= zeta < 1:
        raise ValueError(f"zeta must be in [0, 1), got {zeta}")
    return 1 / (1 - zeta**2) + 2 / (1 - zeta) + zeta / (1 - zeta) ** 2


def max_learning_rate(zeta, q, tau, L, rho, theta) -> float:
    """Largest step size allowed by the convergence bound.

    Minimum of the topology term 1/(4 L q^2 tau^2 Omega1) and every per-device
    term rho^2 (2 theta - 1) / (2 L (2 - theta) rho). May be <= 0, in which
    case no positive step size satisfies the bound.
    """
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if L <= 0:
        raise ValueError("L must be > 0")
    if np.any((rho <= 0) | (rho > 1)) or np.any((theta <= 0) | (theta > 1)):
        raise ValueError("rho and theta must lie in (0, 1]")
    glob = 1.0 / (4 * L * q**2 * tau**2 * omega1(zeta))
    per_dev = (rho**2 - 2 * rho**2 * (1 - theta)) / (2 * L * (2 - theta) * rho)
    return float(min(glob, per_dev.min()))


def even_assignment(n_devices: int, m: int) -> np.ndarray:
    """Contiguous blocks of devices per cluster, sizes differing by at most one."""
    if m < 1 or n_devices < m:
        raise ValueError("need 1 <= m <= n_devices")
    return np.repeat(np.arange(m), [len(b) for b in np.array_split(np.arange(n_devices), m)])


@dataclass(frozen=True)
class ClusterTopology:
    assignment: np.ndarray
    graph: nx.Graph
    H: np.ndarray = field(repr=False)
    zeta: float

    @classmethod
    def build(cls, assignment, graph: nx.Graph) -> "ClusterTopology":
        assignment = np.asarray(assignment, dtype=np.int64)
        m = graph.number_of_nodes()
        if set(np.unique(assignment).tolist()) != set(range(m)):
            raise ValueError("every cluster needs at least one device")
        H = metropolis_mixing(graph)
        zeta = check_mixing(H, graph)
        return cls(assignment, graph, H, zeta)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n_devices(self) -> int:
        return len(self.assignment)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.m)

    def neighbors(self, i: int) -> list[int]:
        return sorted(self.graph.neighbors(i))


def write_edge_list(graph: nx.Graph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# nodes {graph.number_of_nodes()}\n")
        for i, j in sorted((min(e), max(e)) for e in graph.edges()):
            fh.write(f"{i} {j}\n")


def read_edge_list(path, m: int | None = None) -> nx.Graph:
    edges, nodes = [], m
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# nodes"):
                nodes = nodes if nodes is not None else int(line.split()[-1])
                continue
            if not line or line.startswith("#"):
                continue
            i, j = (int(t) for t in line.split())
            edges.append((i, j))
    if nodes is None:
        nodes = 1 + max(max(e) for e in edges) if edges else 1
    g = nx.empty_graph(nodes)
    g.add_edges_from(edges)
    return g
