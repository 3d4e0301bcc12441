"""Replicated experiments: orchestration, persistent outputs and reports."""

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diagnostics import GapSampler, concentration_report, default_delta, rate_fit
from .errors import ParameterError, PreconditionError
from .operators import sample_graph
from .solver import run_batch

BLOCK_SIZE = 25
CSV_COLUMNS = ("n", "t", "psi", "objective", "dist", "gap_estimate", "x_bar_objective")
CHECKPOINT_METRICS = ("dist", "objective_gap", "psi", "x_bar_objective_gap", "x_bar_psi",
                      "gap_estimate")
QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def plan_blocks(n_replicates, block=BLOCK_SIZE):
    """Fixed replicate blocks; the partition never depends on the worker count."""
    return [list(range(s, min(s + block, n_replicates))) for s in range(0, n_replicates, block)]


def checkpoint_grid(n_steps, count, extra=()):
    """``count`` log-spaced steps in ``[1, n_steps]`` plus ``extra`` and the final step."""
    grid = set()
    if count > 0:
        grid |= {int(round(v)) for v in np.logspace(0.0, np.log10(n_steps), count)}
    grid |= {int(e) for e in extra if 0 < e <= n_steps}
    grid.add(int(n_steps))
    return sorted(grid)


def gap_anchor(problem):
    """A feasible reference point for the restricted gap ball."""
    if problem.known_solution is not None:
        return np.asarray(problem.known_solution, dtype=float)
    base = problem.x_true if problem.x_true is not None else problem.initial_point()
    return problem.constraint.project(np.asarray(base, dtype=float))


def build_gap_sampler(cfg, problem):
    diag = cfg["diagnostics"]
    anchor = gap_anchor(problem)
    delta = diag.get("gap_delta")
    if delta is None:
        try:
            delta = default_delta(problem.constraint, anchor)
        except ParameterError:
            delta = 1.0
    rng = np.random.default_rng(diag["gap_seed"])
    samples = sample_graph(problem.operator, problem.constraint, anchor, delta,
                           diag["gap_samples"], rng)
    return GapSampler(samples, delta, anchor)


def _run_block(data, replicates):
    cfg = RunConfig(data)
    problem = cfg.build_problem()
    schedule = cfg.build_schedule(problem)
    sampler = build_gap_sampler(cfg, problem)
    n_steps = cfg["n_steps"]
    diag = cfg["diagnostics"]
    grid = checkpoint_grid(n_steps, diag["n_log_checkpoints"],
                           list(diag.get("checkpoints", [])) + list(diag["snapshot_steps"]))
    gaps = []
    trajs = run_batch(problem, schedule, cfg.build_noise(), n_steps, cfg["master_seed"], replicates,
                      cfg["record_every"], options=cfg.build_options(), checkpoints=grid,
                      snapshot_steps=list(diag["snapshot_steps"]) + [n_steps],
                      callback=lambda n, batch: gaps.append(sampler(batch.x_bar)))
    gap_arr = np.stack(gaps, axis=1)
    for i, tr in enumerate(trajs):
        tr.records["gap_estimate"] = gap_arr[i]
    return trajs


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    return obj


def _stats(values):
    v = np.asarray([np.nan if x is None else x for x in values], dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": None, "median": None, "quantiles": None, "count": 0}
    return {"mean": float(v.mean()), "median": float(np.median(v)),
            "quantiles": {str(q): float(np.quantile(v, q)) for q in QUANTILES},
            "count": int(v.size)}


@dataclass
class RunReport:
    """Per-replicate rows plus everything derived from them.

    ``aggregates``, ``rate_fit`` and ``concentration`` are functions of
    ``rows`` (see :func:`summarize`), so reports from separate runs of one
    configuration can be pooled with :func:`replicate_aggregate`.
    """

    config_hash: str
    config: dict
    rows: list
    checkpoints: list
    checkpoint_t: list
    aggregates: dict = field(default_factory=dict)
    rate_fit: dict = None
    concentration: dict = None
    n_steps: int = 0
    wall_clock_seconds: float = None

    @property
    def n_diverged(self):
        return sum(r["status"] == "diverged" for r in self.rows)

    def to_dict(self, timing=True):
        out = {
            "config_hash": self.config_hash,
            "config": self.config,
            "n_steps": self.n_steps,
            "n_replicates": len(self.rows),
            "total_steps": self.n_steps * len(self.rows),
            "n_diverged": self.n_diverged,
            "checkpoints": self.checkpoints,
            "checkpoint_t": self.checkpoint_t,
            "aggregates": self.aggregates,
            "rate_fit": self.rate_fit,
            "concentration": self.concentration,
            "rows": self.rows,
        }
        if timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return _clean(out)

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=1, sort_keys=True)


def _row(tr, problem, grid, concentration):
    rec = tr.records
    pos = {int(n): k for k, n in enumerate(rec["n"])}
    idx = [pos[n] for n in grid]
    phi_min = problem.phi_min
    obj_gap = rec["objective"] - phi_min if phi_min is not None else np.full(rec["n"].size, np.nan)
    xbar_gap = (rec["xbar_objective"] - phi_min if phi_min is not None
                else np.full(rec["n"].size, np.nan))
    series = {"dist": rec["dist"], "objective_gap": obj_gap, "psi": rec["psi"],
              "x_bar_objective_gap": xbar_gap, "x_bar_psi": rec["xbar_psi"],
              "gap_estimate": rec["gap_estimate"]}
    x = tr.final.x
    psi0 = float(problem.penalty.value(problem.initial_point()))
    final = {
        "n": int(tr.final.n), "t": tr.final.t,
        "psi": float(rec["psi"][-1]), "psi_ratio": float(rec["psi"][-1]) / psi0 if psi0 > 0 else None,
        "objective": float(rec["objective"][-1]), "dist": float(rec["dist"][-1]),
        "objective_gap": float(obj_gap[-1]), "x_bar_objective": float(rec["xbar_objective"][-1]),
        "x_bar_objective_gap": float(xbar_gap[-1]), "x_bar_psi": float(rec["xbar_psi"][-1]),
        "gap_estimate": float(rec["gap_estimate"][-1]),
        "reconstruction_error": (float(np.linalg.norm(x - problem.x_true) / np.linalg.norm(problem.x_true))
                                 if problem.x_true is not None and np.any(problem.x_true) else None),
    }
    row = {"replicate": tr.metadata["replicate"], "status": tr.status, "error": tr.error,
           "final": final,
           "checkpoints": {k: [float(series[k][i]) for i in idx] for k in CHECKPOINT_METRICS}}
    if concentration is not None:
        row["concentration"] = concentration
    return row


def summarize(rows, checkpoints, checkpoint_t, epsilons, rate_decades):
    """Aggregates, rate fit and concentration table recomputed from rows."""
    live = [r for r in rows if r["status"] != "diverged"]
    agg = {"final": {}, "checkpoints": {}}
    for key in ("dist", "objective_gap", "psi", "psi_ratio", "x_bar_objective_gap", "gap_estimate",
                "reconstruction_error"):
        agg["final"][key] = _stats([r["final"][key] for r in live])
    for key in CHECKPOINT_METRICS:
        agg["checkpoints"][key] = [_stats([r["checkpoints"][key][i] for r in live])
                                   for i in range(len(checkpoints))]
    fit = None
    t = np.asarray(checkpoint_t, dtype=float)
    if live and t.size:
        mean_gap = np.array([s["mean"] if s["mean"] is not None else np.nan
                             for s in agg["checkpoints"]["x_bar_objective_gap"]])
        window = t >= t[-1] / 10.0 ** rate_decades
        if np.any(np.isfinite(mean_gap[window])):
            try:
                rf = rate_fit(t[window], mean_gap[window], tail_fraction=1.0)
                fit = {"slope": rf.slope, "r_squared": rf.r_squared, "intercept": rf.intercept,
                       "n_points": rf.n_points, "t_min": float(t[window][0]), "t_max": float(t[-1])}
            except ParameterError as exc:
                fit = {"error": str(exc)}
    conc = None
    with_conc = [r for r in live if "concentration" in r]
    if with_conc:
        table = []
        for eps in epsilons:
            ind = [r["concentration"]["exceed"][str(float(eps))] for r in with_conc]
            table.append({"epsilon": float(eps), "frequency": float(np.mean(ind)),
                          "bound": float(np.exp(-eps * eps / 4.0)), "n_replicates": len(ind)})
        conc = {"rows": table,
                "empirical_reference": bool(with_conc[0]["concentration"]["empirical_reference"])}
    return agg, fit, conc


def _concentration_rows(trajs, problem, epsilons, x0):
    live = [tr for tr in trajs if not tr.diverged]
    if not live:
        return {}
    rep = concentration_report(live, epsilons, problem, x0=x0)
    out = {}
    for tr, r in zip(live, rep.replicates):
        exceed = {str(float(e)): float(r["delta_phi_bar"] >= r["Q0"] + e * r["Q1"]) for e in epsilons}
        out[id(tr)] = {"Q0": r["Q0"], "Q1": r["Q1"], "delta_phi_bar": r["delta_phi_bar"],
                       "exceed": exceed, "empirical_reference": rep.empirical_reference}
    return out


def run_experiment(config, threads=None, out_dir=None, write=True):
    """Run all replicates of ``config`` and (optionally) write the outputs.

    Files in ``out_dir`` (default ``config["output_dir"]``):
    ``replicate_XXXX.csv`` traces, ``snapshots_XXXX.csv`` iterates at the
    snapshot steps and the final step, and ``report.json``.
    """
    start = time.perf_counter()
    cfg = config if isinstance(config, RunConfig) else RunConfig(config)
    threads = int(threads or os.cpu_count() or 1)
    blocks = plan_blocks(cfg["n_replicates"])
    if threads > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(blocks))) as pool:
            results = list(pool.map(_run_block, [cfg.data] * len(blocks), blocks))
    else:
        results = [_run_block(cfg.data, b) for b in blocks]
    trajs = [tr for block in results for tr in block]

    problem = cfg.build_problem()
    diag = cfg["diagnostics"]
    n_steps = cfg["n_steps"]
    grid = checkpoint_grid(n_steps, diag["n_log_checkpoints"],
                           list(diag.get("checkpoints", [])) + list(diag["snapshot_steps"]))
    rec0 = trajs[0].records
    t_of = dict(zip(rec0["n"].tolist(), rec0["t"].tolist()))
    grid_t = [t_of[n] for n in grid]
    epsilons = [float(e) for e in diag["epsilons"]]
    conc = {}
    if cfg.build_noise().active and problem.has_phi:
        try:
            conc = _concentration_rows(trajs, problem, epsilons, problem.initial_point())
        except PreconditionError:
            conc = {}
    rows = [_row(tr, problem, grid, conc.get(id(tr))) for tr in trajs]
    agg, fit, table = summarize(rows, grid, grid_t, epsilons, diag["rate_decades"])
    report = RunReport(cfg.config_hash, cfg.data, rows, grid, grid_t, agg, fit, table, n_steps)
    report.wall_clock_seconds = time.perf_counter() - start
    if write:
        write_outputs(report, trajs, Path(out_dir or cfg["output_dir"]))
    return report


def write_trace_csv(path, traj, config_hash):
    rec = traj.records
    cols = [rec["n"], rec["t"], rec["psi"], rec["objective"], rec["dist"], rec["gap_estimate"],
            rec["xbar_objective"]]
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for k in range(rec["n"].size):
            fh.write(",".join(_fmt(c[k]) if j else str(int(c[k])) for j, c in enumerate(cols)) + "\n")


def write_snapshots_csv(path, traj, config_hash):
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        fh.write("step,which,values\n")
        for step in sorted(traj.snapshots):
            for which in ("x", "x_bar"):
                vals = " ".join(_fmt(v) for v in traj.snapshots[step][which])
                fh.write(f"{step},{which},{vals}\n")


def write_outputs(report, trajs, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    for tr in trajs:
        r = tr.metadata["replicate"]
        write_trace_csv(out_dir / f"replicate_{r:04d}.csv", tr, report.config_hash)
        write_snapshots_csv(out_dir / f"snapshots_{r:04d}.csv", tr, report.config_hash)
    (out_dir / "report.json").write_text(report.to_json())


def replicate_aggregate(reports):
    """Pool several reports of one configuration into a single report."""
    if not reports:
        raise ParameterError("nothing to aggregate")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ParameterError(f"cannot pool reports with mixed config hashes: {sorted(hashes)}")
    first = reports[0]
    rows = [row for r in reports for row in r.rows]
    diag = first.config["diagnostics"]
    agg, fit, conc = summarize(rows, first.checkpoints, first.checkpoint_t,
                               [float(e) for e in diag["epsilons"]], diag["rate_decades"])
    return RunReport(first.config_hash, first.config, rows, first.checkpoints, first.checkpoint_t,
                     agg, fit, conc, first.n_steps)
