"""Experiment configuration, sweeps, result files and the command line.

A run directory holds::

    config.json            resolved experiment config (re-runnable as is)
    traces/<cell>_s<seed>.csv
    edges/<cell>_s<seed>.txt  backhaul edge list actually used
    summary.csv            per-cell medians over seeds
    failures.csv           only when some cell raised

Trace and summary CSVs start with a versioned ``#`` comment line.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMES
from .cost import HeterogeneityProfile
from .protocol import RoundTrace, Simulation, SimulationConfig, build_topology
from .topology import write_edge_list

log = logging.getLogger(__name__)

TRACE_VERSION = "# hcef-trace v1"
SUMMARY_VERSION = "# hcef-summary v1"
PLOT_VERSION = "# hcef-plot v1"
OUTPUT_ROOT_ENV = "HCEF_OUTPUT_ROOT"

TRACE_COLUMNS = (
    "l",
    "r",
    "loss",
    "accuracy",
    "cum_time",
    "cum_energy",
    "mean_rho",
    "mean_theta",
    "iterations",
    "feasible",
    "realized_steps",
    "stopped",
    "cluster_times",
)
SUMMARY_COLUMNS = (
    "cell",
    "scheme",
    "beta",
    "p_edge",
    "q",
    "tau",
    "n_runs",
    "n_failed",
    "n_reached",
    "median_time_to_target",
    "median_energy_to_target",
    "median_final_loss",
    "median_final_accuracy",
)
PLOT_PAIRS = (
    ("cum_time", "accuracy"),
    ("cum_energy", "accuracy"),
    ("cum_time", "loss"),
    ("cum_energy", "loss"),
)


class ConfigError(ValueError):
    """Raised for any schema or value problem in an experiment config."""


# ---------------------------------------------------------------- config

_SIM_KEYS = tuple(
    f.name
    for f in dataclasses.fields(SimulationConfig)
    if f.name not in ("T_budget", "E_budget", "scheme", "seed", "profile", "beta", "p_edge", "q", "tau")
)
_PROFILE_KEYS = tuple(f.name for f in dataclasses.fields(HeterogeneityProfile))
_SWEEP_KEYS = ("schemes", "beta", "p_edge", "q", "tau", "seeds")
_TOP_KEYS = ("budgets", "simulation", "profile", "sweep", "output_dir", "targets", "workers", "oracle")


@dataclass
class ExperimentSpec:
    base: SimulationConfig
    schemes: tuple = ("HCEF",)
    betas: tuple = (1.0,)
    p_edges: tuple = (0.5,)
    qs: tuple = (5,)
    taus: tuple = (5,)
    seeds: tuple = (0,)
    output_dir: str = "runs/experiment"
    target_loss: float | None = None
    target_accuracy: float | None = None
    workers: int = 1
    oracle_instances: int = 100
    oracle_seed: int = 0

    def cells(self):
        """(cell name, config) for every sweep point and seed, in a fixed order."""
        for scheme, beta, p_edge, q, tau in itertools.product(
            self.schemes, self.betas, self.p_edges, self.qs, self.taus
        ):
            name = cell_name(scheme, beta, p_edge, q, tau)
            for seed in self.seeds:
                cfg = dataclasses.replace(
                    self.base, scheme=scheme, beta=beta, p_edge=p_edge, q=q, tau=tau, seed=seed
                )
                yield name, seed, cfg


def cell_name(scheme, beta, p_edge, q, tau) -> str:
    return f"{scheme}_b{beta:g}_p{p_edge:g}_q{q}_t{tau}"


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")


def _axis(sweep, key, default, cast):
    vals = sweep.get(key, default)
    if not isinstance(vals, list) or not vals:
        raise ConfigError(f"sweep.{key} must be a non-empty list")
    try:
        return tuple(cast(v) for v in vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep.{key}: {exc}") from None


def spec_from_dict(raw: dict) -> ExperimentSpec:
    """Validate a parsed JSON config and build the experiment spec."""
    _check_keys(raw, _TOP_KEYS, "")
    budgets = raw.get("budgets")
    if not budgets:
        raise ConfigError("budgets required")
    _check_keys(budgets, ("time_s", "energy_j"), "budgets")
    if "time_s" not in budgets or "energy_j" not in budgets:
        raise ConfigError("budgets required")

    sim = raw.get("simulation", {})
    _check_keys(sim, _SIM_KEYS, "simulation")
    prof = raw.get("profile", {})
    _check_keys(prof, _PROFILE_KEYS, "profile")
    sweep = raw.get("sweep", {})
    _check_keys(sweep, _SWEEP_KEYS, "sweep")
    targets = raw.get("targets", {})
    _check_keys(targets, ("loss", "accuracy"), "targets")
    oracle = raw.get("oracle", {})
    _check_keys(oracle, ("instances", "seed"), "oracle")

    prof = {k: tuple(v) if isinstance(v, list) else v for k, v in prof.items()}
    try:
        profile = HeterogeneityProfile(**prof)
        base = SimulationConfig(
            T_budget=float(budgets["time_s"]),
            E_budget=float(budgets["energy_j"]),
            profile=profile,
            **sim,
        )
        spec = ExperimentSpec(
            base=base,
            schemes=_axis(sweep, "schemes", ["HCEF"], str),
            betas=_axis(sweep, "beta", [1.0], float),
            p_edges=_axis(sweep, "p_edge", [base.p_edge], float),
            qs=_axis(sweep, "q", [5], int),
            taus=_axis(sweep, "tau", [5], int),
            seeds=_axis(sweep, "seeds", [0], int),
            output_dir=str(raw.get("output_dir", "runs/experiment")),
            target_loss=targets.get("loss"),
            target_accuracy=targets.get("accuracy"),
            workers=int(raw.get("workers", 1)),
            oracle_instances=int(oracle.get("instances", 100)),
            oracle_seed=int(oracle.get("seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for scheme in spec.schemes:
        if scheme not in SCHEMES:
            raise ConfigError(f"sweep.schemes: unknown scheme {scheme!r}")
    if spec.workers < 1:
        raise ConfigError("workers must be >= 1")
    for _, _, cfg in spec.cells():
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return spec


def parse_config(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return spec_from_dict(raw)


def spec_to_dict(spec: ExperimentSpec) -> dict:
    base = dataclasses.asdict(spec.base)
    profile = {k: list(v) if isinstance(v, tuple) else v for k, v in base.pop("profile").items()}
    sim = {k: base[k] for k in _SIM_KEYS}
    return {
        "budgets": {"time_s": spec.base.T_budget, "energy_j": spec.base.E_budget},
        "simulation": sim,
        "profile": profile,
        "sweep": {
            "schemes": list(spec.schemes),
            "beta": list(spec.betas),
            "p_edge": list(spec.p_edges),
            "q": list(spec.qs),
            "tau": list(spec.taus),
            "seeds": list(spec.seeds),
        },
        "output_dir": spec.output_dir,
        "targets": {"loss": spec.target_loss, "accuracy": spec.target_accuracy},
        "workers": spec.workers,
        "oracle": {"instances": spec.oracle_instances, "seed": spec.oracle_seed},
    }


def emit_config(spec: ExperimentSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2, sort_keys=True) + "\n"


def resolve_output_dir(spec: ExperimentSpec) -> Path:
    """``spec.output_dir``, placed under $HCEF_OUTPUT_ROOT when that is set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(spec.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# ---------------------------------------------------------------- traces


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ";".join(repr(float(x)) for x in v)
    return str(v)


def traces_to_csv(traces: list[RoundTrace]) -> str:
    buf = io.StringIO()
    buf.write(TRACE_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in traces:
        w.writerow([_fmt(getattr(t, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def read_trace(path) -> list[dict]:
    """Rows of a trace CSV as dicts with numeric fields converted."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != TRACE_VERSION:
            raise ValueError(f"{path}: expected header {TRACE_VERSION!r}, got {first!r}")
        rows = []
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k in ("l", "r", "iterations", "realized_steps"):
                    rec[k] = int(v)
                elif k in ("feasible", "stopped"):
                    rec[k] = v == "1"
                elif k == "cluster_times":
                    rec[k] = tuple(float(x) for x in v.split(";")) if v else ()
                else:
                    rec[k] = float(v)
            rows.append(rec)
    return rows


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


def time_to_target(rows, target_loss=None, target_accuracy=None) -> tuple[float, float]:
    """(cum_time, cum_energy) of the first round meeting the target, else (inf, inf).

    A loss target is met when loss <= target; an accuracy target when
    accuracy >= target. With both given, both must hold.
    """
    if target_loss is None and target_accuracy is None:
        raise ValueError("need a loss or an accuracy target")
    for row in rows:
        ok = True
        if target_loss is not None:
            ok = ok and _get(row, "loss") <= target_loss
        if target_accuracy is not None:
            ok = ok and _get(row, "accuracy") >= target_accuracy
        if ok:
            return _get(row, "cum_time"), _get(row, "cum_energy")
    return math.inf, math.inf


def emit_plot_data(traces: dict) -> str:
    """Long-format CSV of (x, y) points for every trace and axis pairing.

    ``traces`` maps (cell, scheme, seed) to a list of trace rows or
    RoundTrace records.
    """
    if not traces:
        raise ValueError("no traces to emit")
    buf = io.StringIO()
    buf.write(PLOT_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cell", "scheme", "seed", "x_metric", "y_metric", "l", "r", "x", "y"))
    for (cell, scheme, seed), rows in sorted(traces.items()):
        for x_key, y_key in PLOT_PAIRS:
            for row in rows:
                w.writerow(
                    (cell, scheme, seed, x_key, y_key, _get(row, "l"), _get(row, "r"),
                     repr(float(_get(row, x_key))), repr(float(_get(row, y_key))))
                )
    return buf.getvalue()


# ---------------------------------------------------------------- running


def _run_cell(job):
    name, seed, cfg, out = job
    tag = f"{name}_s{seed}"
    try:
        sim = Simulation(cfg)
        traces = sim.run()
        (out / "traces" / f"{tag}.csv").write_text(traces_to_csv(traces))
        write_edge_list(sim.topo.graph, out / "edges" / f"{tag}.txt")
        return name, seed, None
    except Exception as exc:  # recorded, the sweep goes on
        log.error("cell %s failed: %s", tag, exc)
        return name, seed, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def _median(vals):
    return float(np.median(vals)) if vals else math.nan


def summarize(spec: ExperimentSpec, out: Path, failed: set) -> str:
    """Per-cell medians computed from the trace files on disk."""
    buf = io.StringIO()
    buf.write(SUMMARY_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    has_target = spec.target_loss is not None or spec.target_accuracy is not None
    for scheme, beta, p_edge, q, tau in itertools.product(
        spec.schemes, spec.betas, spec.p_edges, spec.qs, spec.taus
    ):
        name = cell_name(scheme, beta, p_edge, q, tau)
        times, energies, losses, accs = [], [], [], []
        n_failed = 0
        for seed in spec.seeds:
            if (name, seed) in failed:
                n_failed += 1
                continue
            rows = read_trace(out / "traces" / f"{name}_s{seed}.csv")
            if has_target:
                t, e = time_to_target(rows, spec.target_loss, spec.target_accuracy)
                times.append(t)
                energies.append(e)
            losses.append(rows[-1]["loss"])
            accs.append(rows[-1]["accuracy"])
        reached = sum(math.isfinite(t) for t in times)
        w.writerow(
            (name, scheme, repr(beta), repr(p_edge), q, tau, len(spec.seeds), n_failed,
             reached if has_target else "",
             repr(_median(times)) if has_target else "",
             repr(_median(energies)) if has_target else "",
             repr(_median(losses)), repr(_median(accs)))
        )
    return buf.getvalue()


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != SUMMARY_VERSION:
            raise ValueError(f"{path}: expected header {SUMMARY_VERSION!r}")
        return list(csv.DictReader(fh))


def run_experiment(spec: ExperimentSpec, out: Path | None = None) -> tuple[Path, list]:
    """Run every cell of ``spec``; return (run directory, failures)."""
    out = Path(out) if out is not None else resolve_output_dir(spec)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "edges").mkdir(exist_ok=True)
    (out / "config.json").write_text(emit_config(spec))
    jobs = [(name, seed, cfg, out) for name, seed, cfg in spec.cells()]
    if spec.workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    failures = [(name, seed, err) for name, seed, err in results if err is not None]
    failed = {(name, seed) for name, seed, _ in failures}
    (out / "summary.csv").write_text(summarize(spec, out, failed))
    fail_path = out / "failures.csv"
    if failures:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("cell", "seed", "error"))
        w.writerows(failures)
        fail_path.write_text(buf.getvalue())
    elif fail_path.exists():
        fail_path.unlink()
    return out, failures


def collect_traces(run_dir) -> dict:
    """Load every trace of a run directory keyed (cell, scheme, seed)."""
    run_dir = Path(run_dir)
    out = {}
    for path in sorted((run_dir / "traces").glob("*.csv")):
        cell, _, seed = path.stem.rpartition("_s")
        out[(cell, cell.split("_b")[0], int(seed))] = read_trace(path)
    return out


def oracle_check(spec: ExperimentSpec) -> tuple[int, int]:
    """(agreeing instances, total) of the controller against the grid search."""
    from .controller import alternating_solve
    from .oracle import brute_force, random_instance

    rng = np.random.default_rng(spec.oracle_seed)
    good = 0
    for _ in range(spec.oracle_instances):
        params = random_instance(rng)
        dec = alternating_solve(params, spec.base.eps, spec.base.i_max)
        ref = brute_force(params)
        if not ref.feasible:
            good += not dec.feasible
        else:
            good += dec.feasible and dec.objective <= ref.objective + 1e-3
    return good, spec.oracle_instances


# ---------------------------------------------------------------- CLI


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hcef", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run every cell of an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="run directory (overrides output_dir)")
    p_or = sub.add_parser("oracle", help="check the controller against the grid search")
    p_or.add_argument("config")
    p_plot = sub.add_parser("plotdata", help="write plot_data.csv for a run directory")
    p_plot.add_argument("run_dir")
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.cmd == "plotdata":
        traces = collect_traces(args.run_dir)
        if not traces:
            print(f"no traces under {args.run_dir}", file=sys.stderr)
            return 2
        path = Path(args.run_dir) / "plot_data.csv"
        path.write_text(emit_plot_data(traces))
        print(path)
        return 0

    try:
        spec = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.cmd == "oracle":
        good, total = oracle_check(spec)
        rate = good / total
        print(f"controller within 1e-3 of grid optimum on {good}/{total} instances ({rate:.0%})")
        return 0 if rate >= 0.95 else 3
    out, failures = run_experiment(spec, Path(args.out) if args.out else None)
    print(out)
    if failures:
        print(f"{len(failures)} cell(s) failed; see {out / 'failures.csv'}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
