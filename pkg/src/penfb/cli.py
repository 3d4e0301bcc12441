"""Command-line entry point ``penfb``.

Exit codes: 0 success, 2 configuration error, 3 every replicate diverged.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .diagnostics import dist_to_solution, objective_gap
from .errors import ConfigError, InputError
from .experiment import build_gap_sampler, run_experiment
from .penalty import check_ac_condition
from .stochastic import check_noise_summability

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _cmd_solve(args):
    cfg = parse_config(args.config, master_seed=args.seed)
    report = run_experiment(cfg, threads=args.threads, out_dir=args.out)
    out = Path(args.out or cfg["output_dir"])
    fit = report.rate_fit or {}
    print(f"config_hash {report.config_hash}")
    print(f"replicates {len(report.rows)}  diverged {report.n_diverged}  steps {report.n_steps}")
    final = report.aggregates["final"]
    for key in ("dist", "psi", "x_bar_objective_gap", "gap_estimate", "reconstruction_error"):
        med = final[key]["median"]
        if med is not None:
            print(f"median final {key} {med:.6g}")
    if "slope" in fit:
        print(f"rate fit slope {fit['slope']:.4f}  R^2 {fit['r_squared']:.4f}  "
              f"t in [{fit['t_min']:.4g}, {fit['t_max']:.4g}]")
    if report.concentration:
        for row in report.concentration["rows"]:
            print(f"eps {row['epsilon']:g}  frequency {row['frequency']:.4f}  bound {row['bound']:.4f}")
    print(f"outputs in {out}")
    return EXIT_DIVERGED if report.n_diverged == len(report.rows) else EXIT_OK


def _cmd_check_ac(args):
    cfg = parse_config(args.config)
    problem = cfg.build_problem()
    schedule = cfg.build_schedule(problem)
    diag = cfg["diagnostics"]
    rng = np.random.default_rng(diag["gap_seed"])
    samples = problem.constraint.sample_normal_range(rng, diag["ac_samples"])
    report = check_ac_condition(schedule, problem.penalty, problem.constraint, samples,
                                diag["ac_horizon"])
    print(f"{'sample':>6}  {'verdict':<12}  {'tail slope':>10}  {'partial sum':>14}")
    for i, (v, s) in enumerate(zip(report.sample_verdicts, report.slopes)):
        print(f"{i:>6}  {v:<12}  {s:>10.4f}  {report.partial_sums[i, -1]:>14.6g}")
    noise_verdict, sums = check_noise_summability(schedule, cfg.build_noise(), problem.dim,
                                                  diag["ac_horizon"])
    print(f"AC condition: {report.verdict}")
    print(f"noise summability (sum lambda_n^2 Sigma_n^2 = {sums[-1]:.6g}): {noise_verdict}")
    if report.message:
        print(report.message)
    return EXIT_OK


def _cmd_gap(args):
    cfg = parse_config(args.config)
    problem = cfg.build_problem()
    try:
        point = np.atleast_1d(np.loadtxt(args.point, dtype=float, comments="#").ravel())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read point from {args.point}: {exc}") from exc
    if point.size != problem.dim:
        raise InputError(f"point has {point.size} entries, problem dimension is {problem.dim}")
    sampler = build_gap_sampler(cfg, problem)
    out = {"psi": float(problem.penalty.value(point)),
           "gap_estimate": float(sampler(point)), "gap_samples": len(sampler),
           "gap_delta": float(sampler.delta)}
    if problem.has_phi:
        out["objective"] = float(problem.phi(point))
        if problem.phi_min is not None:
            out["objective_gap"] = float(objective_gap(problem, point))
    if problem.known_solution is not None:
        out["dist"] = float(dist_to_solution(problem, point))
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_radon_export(args):
    cfg = parse_config(args.config)
    if cfg["problem"]["family"] != "radon":
        raise ConfigError(["problem/family: radon-export needs a radon problem"])
    problem = cfg.build_problem()
    out = Path(args.out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    a = problem.penalty.matrix
    with open(out / "radon_matrix.txt", "w") as fh:
        fh.write(f"# {a.shape[0]} {a.shape[1]} {a.nnz}\n")
        for line in a.coordinate_lines():
            fh.write(line + "\n")
    np.savetxt(out / "sinogram.txt", problem.penalty.rhs, fmt="%.17g")
    np.savetxt(out / "phantom.txt", problem.x_true, fmt="%.17g")
    print(f"wrote {a.shape[0]}x{a.shape[1]} matrix with {a.nnz} nonzeros to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="penfb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="run a replicated experiment")
    p.add_argument("config")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--out", default=None, help="override output_dir")
    p.set_defaults(func=_cmd_solve)
    p = sub.add_parser("check-ac", help="test the AC summability condition")
    p.add_argument("config")
    p.set_defaults(func=_cmd_check_ac)
    p = sub.add_parser("gap", help="evaluate diagnostics at a saved point")
    p.add_argument("config")
    p.add_argument("--point", required=True, help="text file with one coordinate per entry")
    p.set_defaults(func=_cmd_gap)
    p = sub.add_parser("radon-export", help="dump the Radon matrix as 'row col value' lines")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_radon_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for msg in exc.errors:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
