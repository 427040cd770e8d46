"""Acceptance suite: one test per criterion, each echoing a PASS/FAIL line.

Criteria 7 and 8 share one experiment run (module fixture) of the shipped
configs: five schemes on the default ring fleet plus HCEF on random backhaul
graphs at two edge probabilities, five seeds each.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from hcef.compression import n_kept, random_k, top_k
from hcef.controller import ControlParams, alternating_solve
from hcef.cost import Projection
from hcef.harness import parse_config, read_summary, read_trace, run_experiment, spec_from_dict
from hcef.model_core import Batch, LossModel, loss, stochastic_gradient
from hcef.oracle import brute_force, random_instance
from hcef.protocol import (
    INIT_STREAM,
    SAMPLER_STREAM,
    SimulationConfig,
    inter_cluster_gossip,
    prepare_data,
    run,
)
from hcef.data import BatchSampler
from hcef.model_core import init_model, logistic_smoothness, sgd_step
from hcef.topology import (
    build_complete,
    build_erdos_renyi,
    build_ring,
    check_mixing,
    metropolis_mixing,
    spectral_gap,
)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_contraction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    violations = 0
    for _ in range(1000):
        x = rng.normal(size=int(rng.integers(1, 200))) * rng.lognormal(0, 2)
        for theta in (0.1, 0.5, 0.9):
            k = n_kept(theta, len(x))
            resid = np.sum((x - top_k(x, theta).densify()) ** 2)
            violations += resid > (1 - k / len(x)) * np.sum(x**2) * (1 + 1e-12)
    x = rng.normal(size=50)
    theta, k = 0.2, n_kept(0.2, 50)
    draws = 100_000
    mean_resid = sum(np.sum(x**2) - np.sum(random_k(x, theta, rng).values ** 2) for _ in range(draws)) / draws
    expected = (1 - k / 50) * np.sum(x**2)
    rel = abs(mean_resid / expected - 1)
    elapsed = time.perf_counter() - t0
    record(1, violations == 0 and rel < 0.02 and elapsed < 10,
           f"violations={violations}, random_k rel err={rel:.4f}, {elapsed:.1f}s")


def test_criterion_2_mixing():
    t0 = time.perf_counter()
    graphs = [build_ring(m) for m in range(2, 13)] + [build_complete(m) for m in range(1, 13)]
    graphs += [build_erdos_renyi(m, p, seed=s) for m in (3, 8, 12) for p in (0.2, 0.5, 1.0) for s in range(5)]
    worst = 0.0
    for g in graphs:
        H = metropolis_mixing(g)
        check_mixing(H, g, tol=1e-12)
        worst = max(worst, np.abs(H.sum(0) - 1).max(), np.abs(H.sum(1) - 1).max())
    ring_err = abs(spectral_gap(metropolis_mixing(build_ring(8))) - (1 / 3 + 2 / 3 * np.cos(np.pi / 4)))
    complete_zeta = spectral_gap(metropolis_mixing(build_complete(8)))
    rng = np.random.default_rng(2)
    bad = 0
    for s in range(100):
        m = int(rng.integers(2, 13))
        H = metropolis_mixing(build_erdos_renyi(m, 0.4, seed=s))
        Y = rng.normal(size=(m, 10))
        before = np.linalg.norm(Y - Y.mean(0))
        Z = inter_cluster_gossip(Y, H)
        bad += np.linalg.norm(Z - Z.mean(0)) > spectral_gap(H) * before + 1e-12
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and ring_err < 1e-9 and complete_zeta < 1e-9 and bad == 0 and elapsed < 5
    record(2, ok, f"max row/col err={worst:.1e}, ring err={ring_err:.1e}, "
                  f"complete zeta={complete_zeta:.1e}, gossip violations={bad}, {elapsed:.1f}s")


def _independent_feasible(pr, rho, theta, rtol=1e-9):
    t = rho * pr.tau * pr.mu + theta * pr.nu
    inner = [pr.q_rem * t[pr.cluster == i].max() + pr.hist_time[i] + pr.backhaul[i]
             for i in range(len(pr.hist_time)) if np.any(pr.cluster == i)]
    total_t = pr.phi_rem * max(inner) + pr.past_time
    e = np.sum(rho * pr.tau * pr.alpha + pr.p * theta * pr.nu)
    total_e = pr.phi_rem * (pr.q_rem * e + pr.hist_energy) + pr.past_energy
    box = np.all((rho > 0) & (rho <= 1)) and np.all((theta > 0) & (theta <= 1))
    return bool(box and total_t <= pr.T_budget * (1 + rtol) + rtol
                and total_e <= pr.E_budget * (1 + rtol) + rtol)


def test_criterion_3_controller_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    agree = non_monotone = infeasible_claims = 0
    for _ in range(100):
        params = random_instance(rng)
        dec = alternating_solve(params)
        ref = brute_force(params)
        h = np.array(dec.history)
        if h.size > 1 and np.any(np.diff(h) > 1e-9 * np.maximum(1.0, np.abs(h[:-1]))):
            non_monotone += 1
        if dec.feasible and not _independent_feasible(params.proj, dec.rho, dec.theta):
            infeasible_claims += 1
        if ref.feasible:
            agree += dec.feasible and dec.objective <= ref.objective + 1e-3
        else:
            agree += not dec.feasible
    elapsed = time.perf_counter() - t0
    ok = agree >= 95 and non_monotone == 0 and infeasible_claims == 0 and elapsed < 120
    record(3, ok, f"agreement {agree}/100, non-monotone={non_monotone}, "
                  f"false feasibility={infeasible_claims}, {elapsed:.1f}s")


def test_criterion_4_fixed_point():
    t0 = time.perf_counter()
    n = 4
    pr = Projection(
        tau=5, mu=np.array([80.0, 100, 120, 150]), nu=np.array([1.0, 2, 3, 4]),
        alpha=np.array([2.0, 3, 4, 5]), p=np.array([0.2, 0.4, 0.6, 0.8]),
        cluster=np.array([0, 0, 1, 1]), phi_rem=1, q_rem=1, hist_time=np.zeros(2),
        backhaul=np.zeros(2), past_time=0.0, hist_energy=0.0, past_energy=0.0,
        T_budget=math.inf, E_budget=math.inf,
    )
    dec = alternating_solve(ControlParams(0.0, 1.7, pr), rho0=np.ones(n), theta0=np.ones(n))
    err = float(np.abs(dec.rho - 5 / 6).max())
    elapsed = time.perf_counter() - t0
    record(4, err < 1e-6 and np.all(dec.theta == 1) and elapsed < 1,
           f"max |rho - 5/6| = {err:.1e}, {elapsed:.3f}s")


def test_criterion_5_fedavg_reduction():
    t0 = time.perf_counter()
    cfg = SimulationConfig(T_budget=1e15, E_budget=1e15, scheme="CEF", m=1, q=1, phi=20,
                           topology="complete", lr_override=True)
    traces = run(cfg)
    # reference loop: plain FedAvg, sharing only data, init and sampler streams
    shards, test = prepare_data(cfg)
    lm = LossModel("logistic", shards[0].feature_dim, test.n_classes, 0,
                   logistic_smoothness(np.vstack([s.features for s in shards])))
    x = init_model(lm, np.random.default_rng([cfg.seed, INIT_STREAM]))
    samplers = [BatchSampler(s, cfg.batch_size, np.random.default_rng([cfg.seed, SAMPLER_STREAM, n]))
                for n, s in enumerate(shards)]
    ref = []
    for _ in range(cfg.phi):
        total = np.zeros_like(x)
        for s in samplers:
            w = x
            for _ in range(cfg.tau):
                w = sgd_step(w, stochastic_gradient(w, s.next(), lm), cfg.eta)
            total += w - x
        x = x + total / len(samplers)
        ref.append(loss(x, test.as_batch(), lm))
    got = [t.loss for t in traces]
    mismatches = sum(a != b for a, b in zip(got, ref)) + abs(len(got) - len(ref))
    elapsed = time.perf_counter() - t0
    record(5, mismatches == 0 and elapsed < 30,
           f"{len(got)} rounds, {mismatches} mismatching losses (bitwise), {elapsed:.1f}s")


def test_criterion_6_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for kind in ("logistic", "mlp"):
        for _ in range(50):
            D, C, H, b = (int(v) for v in rng.integers([1, 2, 1, 1], [8, 6, 8, 12]))
            lm = LossModel(kind, D, C, hidden=H if kind == "mlp" else 0)
            w = rng.normal(size=lm.dim) * 0.5
            batch = Batch(rng.normal(size=(b, D)), rng.integers(0, C, size=b))
            g = stochastic_gradient(w, batch, lm)
            fd = np.empty_like(w)
            for i in range(lm.dim):
                e = np.zeros_like(w)
                e[i] = 1e-5
                fd[i] = (loss(w + e, batch, lm) - loss(w - e, batch, lm)) / 2e-5
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    elapsed = time.perf_counter() - t0
    record(6, worst < 1e-4 and elapsed < 30, f"worst relative error {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criteria 7-8


@pytest.fixture(scope="module")
def directional(tmp_path_factory):
    t0 = time.perf_counter()
    main_spec = parse_config("configs/default.json")
    edge_spec = parse_config("configs/p_edge.json")
    root = tmp_path_factory.mktemp("directional")
    main_out, f1 = run_experiment(main_spec, root / "main")
    edge_out, f2 = run_experiment(edge_spec, root / "p_edge")
    elapsed = time.perf_counter() - t0
    return dict(main=(main_spec, main_out), edge=(edge_spec, edge_out),
                failures=f1 + f2, elapsed=elapsed)


def _summary(out):
    return {row["cell"]: row for row in read_summary(out / "summary.csv")}


def test_criterion_7_budget_safety(directional):
    worst_t = worst_e = -math.inf
    n_runs = 0
    for spec, out in (directional["main"], directional["edge"]):
        prof = spec.base.profile
        for name, seed, cfg in spec.cells():
            rows = read_trace(out / "traces" / f"{name}_s{seed}.csv")
            n_params = (cfg.n_classes * cfg.feature_dim + cfg.n_classes)
            nu_max = prof.model_bits(n_params) / (prof.bandwidth_mbps[0] * 1e6)
            floor_t = 1e-3 * cfg.tau * prof.mu_s[1] + 1e-3 * nu_max + prof.backhaul_time(n_params)
            floor_e = cfg.n_devices * (1e-3 * cfg.tau * prof.alpha_j[1] + 1e-3 * prof.power_w[1] * nu_max)
            worst_t = max(worst_t, rows[-1]["cum_time"] - (cfg.T_budget + floor_t))
            worst_e = max(worst_e, rows[-1]["cum_energy"] - (cfg.E_budget + floor_e))
            n_runs += 1
    ok = n_runs >= 12 and worst_t <= 0 and worst_e <= 0 and not directional["failures"]
    record(7, ok, f"{n_runs} runs; max overshoot beyond one floor round: "
                  f"time {worst_t:.1f} s, energy {worst_e:.1f} J")


def test_criterion_8a_hcef_beats_cef(directional):
    spec, out = directional["main"]
    s = _summary(out)
    h, c = s["HCEF_b1_p0.5_q5_t5"], s["CEF_b1_p0.5_q5_t5"]
    ht, he = float(h["median_time_to_target"]), float(h["median_energy_to_target"])
    ct, ce = float(c["median_time_to_target"]), float(c["median_energy_to_target"])
    ok = ht < ct and he < ce and directional["elapsed"] < 900
    record("8a", ok, f"target loss {spec.target_loss}: HCEF {ht:.0f} s / {he:.0f} J vs "
                     f"CEF {ct:.0f} s / {ce:.0f} J; sweep took {directional['elapsed']:.0f}s")


def test_criterion_8b_partial_schemes_beat_cef_c(directional):
    _, out = directional["main"]
    s = _summary(out)
    t = {k: float(s[f"{k}_b1_p0.5_q5_t5"]["median_time_to_target"]) for k in ("CEF-F", "MLL-SGD", "CEF-C")}
    reached = {k: s[f"{k}_b1_p0.5_q5_t5"]["n_reached"] for k in t}
    ok = t["CEF-F"] < t["CEF-C"] and t["MLL-SGD"] < t["CEF-C"]
    record("8b", ok, "median time to target: " + ", ".join(
        f"{k} {v:.0f} s ({reached[k]}/5 reached)" for k, v in t.items()))


def test_criterion_8c_denser_backhaul_no_slower(directional):
    _, out = directional["edge"]
    s = _summary(out)
    lo = float(s["HCEF_b1_p0.2_q5_t5"]["median_time_to_target"])
    hi = float(s["HCEF_b1_p1_q5_t5"]["median_time_to_target"])
    record("8c", hi <= lo, f"median time to target: p_edge 0.2 -> {lo:.0f} s, 1.0 -> {hi:.0f} s")


# ---------------------------------------------------------------- criterion 9


def test_criterion_9_determinism(tmp_path):
    raw = {
        "budgets": {"time_s": 3000.0, "energy_j": 400.0},
        "simulation": {"n_devices": 8, "m": 2, "n_samples": 800, "feature_dim": 5,
                       "n_classes": 3, "batch_size": 16, "phi": 4, "lr_override": True,
                       "topology": "erdos_renyi"},
        "sweep": {"schemes": ["HCEF", "CEF", "CEF-F", "CEF-C", "MLL-SGD"], "q": [2], "tau": [3],
                  "seeds": [0, 1], "p_edge": [0.5]},
        "targets": {"loss": 0.9},
    }
    first, _ = run_experiment(spec_from_dict(raw), tmp_path / "first")
    second, _ = run_experiment(parse_config(first / "config.json"), tmp_path / "second")
    files = sorted(p.relative_to(first) for p in first.rglob("*.csv")) + sorted(
        p.relative_to(first) for p in (first / "edges").glob("*.txt"))
    diff = [str(p) for p in files if (first / p).read_bytes() != (second / p).read_bytes()]
    record(9, len(files) >= 10 and not diff, f"{len(files)} files compared, {len(diff)} differ")
