"""Command line entry point: ``coupledopt run|gen|validate-weights|check-bounds``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 a check ran but did not pass.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__, _kernels
from .algorithm import AlgoParams, run
from .errors import ConfigError, CoupledOptError, GraphError
from .families import default_graph, gen_coupled_quadratic, gen_linear_log, load_problem, \
    save_problem
from .graph import build_weight_matrices, read_edge_list, validate_assumption2
from .metrics import EXTRA_COLUMNS, CSV_COLUMNS, MetricsHook
from .problem import lift, lipschitz_for
from .reference import RateConstants, check_rate_bounds, compute_constants, estimate_dual, \
    solve_reference

log = logging.getLogger("coupledopt")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

# hand-tuned on small grids over (gamma, rho); see the decisions ledger
DEFAULTS = {"linear-log": {"gamma": 0.1, "rho": 1.0},
            "coupled-quadratic": {"gamma": 0.01, "rho": 0.8}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {s}")
    return v


def _gamma(s):
    if s == "auto":
        return s
    return float(s)


def build_parser():
    ap = _Parser(prog="coupledopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def problem_args(p, family_required=False):
        p.add_argument("--family", choices=("linear-log", "coupled-quadratic"),
                       required=family_required)
        p.add_argument("--n", type=_positive_int, default=50)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--d", type=_positive_int, default=2, help="coupled-quadratic: d_i")
        p.add_argument("--m", type=_positive_int, default=2, help="coupled-quadratic: m")
        p.add_argument("--p", type=_positive_int, default=1, help="coupled-quadratic: p")
        p.add_argument("--graph", help="edge-list file (first line n, then 1-based pairs)")

    r = sub.add_parser("run", help="run one experiment")
    problem_args(r)
    r.add_argument("--problem", help="problem JSON file (instead of --family)")
    r.add_argument("--gamma", type=_gamma, default=None, help="step size or 'auto'")
    r.add_argument("--rho", type=float, default=None)
    r.add_argument("--iters", type=_positive_int, default=1000)
    r.add_argument("--engine", choices=("stacked", "decentralized"), default="stacked")
    r.add_argument("--shrink", type=float, default=1.0)
    r.add_argument("--every", type=_positive_int, default=1, help="metrics stride")
    r.add_argument("--tol", type=float, default=1e-6, help="reference solver tolerance")
    r.add_argument("--no-reference", action="store_true",
                   help="skip the reference solve (error columns become NaN)")
    r.add_argument("--audit", action="store_true")
    r.add_argument("--out", required=True)

    g = sub.add_parser("gen", help="generate a problem instance as JSON")
    problem_args(g, family_required=True)
    g.add_argument("--out", required=True)

    w = sub.add_parser("validate-weights", help="check the mixing matrices")
    w.add_argument("--graph", help="edge-list file")
    w.add_argument("--n", type=_positive_int, default=50)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--shrink", type=float, default=1.0)
    w.add_argument("--json", action="store_true")

    c = sub.add_parser("check-bounds", help="check a finished run against its constants")
    c.add_argument("run_dir")
    c.add_argument("--kmin", type=float, default=1e2)
    c.add_argument("--kmax", type=float, default=1e4)
    return ap


# ---------------------------------------------------------------- helpers

def _make_problem(args):
    if getattr(args, "problem", None):
        if args.family:
            raise ConfigError("give either --family or --problem, not both")
        return load_problem(args.problem)
    if not args.family:
        raise ConfigError("one of --family or --problem is required")
    graph = read_edge_list(args.graph) if args.graph else None
    n = graph.n if graph is not None else args.n
    if args.family == "linear-log":
        return gen_linear_log(n, seed=args.seed, graph=graph)
    return gen_coupled_quadratic(n, d=args.d, m=args.m, p=args.p, seed=args.seed, graph=graph)


def _versions():
    import scipy
    out = {"coupledopt": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__,
           "kernels": _kernels.backend()}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def _distributions(meta):
    """Generator metadata without the bulky per-node arrays."""
    return {k: v for k, v in meta.items() if not isinstance(v, (list, np.ndarray))}


# ---------------------------------------------------------------- commands

def cmd_run(args):
    problem = _make_problem(args)
    family = problem.family or "custom-file"
    defaults = DEFAULTS.get(family, DEFAULTS["coupled-quadratic"])
    rho = defaults["rho"] if args.rho is None else args.rho
    gamma = defaults["gamma"] if args.gamma is None else args.gamma
    if not (rho > 0 and np.isfinite(rho)):
        raise ConfigError(f"--rho must be positive, got {rho}")
    if gamma != "auto" and not (gamma > 0 and np.isfinite(gamma)):
        raise ConfigError(f"--gamma must be positive or 'auto', got {gamma}")
    if gamma == "auto" and args.no_reference:
        raise ConfigError("--gamma auto needs the reference solve")
    os.makedirs(args.out, exist_ok=True)

    lp = lift(problem)
    wp = build_weight_matrices(problem.graph, shrink=args.shrink)
    t0 = time.perf_counter()
    ref = None if args.no_reference else solve_reference(lp, tol=args.tol)
    const = None
    if ref is not None:
        duals = estimate_dual(lp, ref)
        probe = AlgoParams(gamma=1.0, rho=rho, max_iter=0, wp=wp)
        lip = lipschitz_for(problem)
        const = compute_constants(lp, ref, duals, probe, lipschitz=lip,
                                  gamma="tilde" if gamma == "auto" else gamma)
        gamma = const.gamma
    params = AlgoParams(gamma=float(gamma), rho=float(rho), max_iter=args.iters, wp=wp)
    hook = MetricsHook(lp, ref=ref, every=args.every)
    traj = run(lp, params, hooks=(hook,), engine=args.engine,
               audit=args.audit and args.engine == "decentralized")
    elapsed = time.perf_counter() - t0

    hook.records.to_csv(os.path.join(args.out, "metrics.csv"))
    arrays = hook.records.arrays()
    np.savez(os.path.join(args.out, "series.npz"),
             **{c: arrays[c] for c in CSV_COLUMNS + EXTRA_COLUMNS})
    if const is not None:
        const.to_json(os.path.join(args.out, "constants.json"))
    audit_rows = None
    if traj.audit is not None:
        traj.audit.to_csv(os.path.join(args.out, "audit.csv"))
        audit_rows = len(traj.audit.rows)
    xbar = traj.ybar
    manifest = {
        "family": family, "n": problem.n, "seed": args.seed if not args.problem else None,
        "problem_file": args.problem,
        "params": {"gamma": params.gamma, "gamma_source": "auto" if args.gamma == "auto"
                   else ("default" if args.gamma is None else "user"),
                   "rho": params.rho, "iters": args.iters, "engine": args.engine,
                   "shrink": args.shrink, "every": args.every},
        "theoretical_guarantee": None if const is None else const.theoretical_guarantee,
        "gamma_tilde": None if const is None else const.gamma_tilde,
        "reference": None if ref is None else {"method": ref.method, "f_star": ref.f_star,
                                               "converged": ref.converged},
        "distributions": _distributions(problem.meta or {}),
        "edges": len(problem.graph.edge_list_1based()),
        "versions": _versions(), "elapsed_s": elapsed,
        "final": {"k": traj.k,
                  "objective_avg": None if xbar is None
                  else float(lp.objective_x(lp.split(xbar)[0]))},
        "audit_rows": audit_rows,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    if const is not None and not const.theoretical_guarantee:
        log.warning("gamma = %.4g is outside the theoretical range (gamma~ = %.4g); "
                    "running anyway", params.gamma, const.gamma_tilde)
    print(f"wrote {traj.k} iterations to {args.out}")
    return EXIT_OK


def cmd_gen(args):
    problem = _make_problem(args)
    save_problem(problem, args.out)
    print(f"wrote {problem.family} instance (n={problem.n}) to {args.out}")
    return EXIT_OK


def cmd_validate_weights(args):
    graph = read_edge_list(args.graph) if args.graph else default_graph(args.n, args.seed)
    wp = build_weight_matrices(graph, shrink=args.shrink)
    rep = validate_assumption2(wp, graph)
    if args.json:
        print(json.dumps(rep.as_dict(), indent=2))
    else:
        print("\n".join(rep.lines()))
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_check_bounds(args):
    cpath = os.path.join(args.run_dir, "constants.json")
    spath = os.path.join(args.run_dir, "series.npz")
    for path in (cpath, spath):
        if not os.path.exists(path):
            raise ConfigError(f"missing {path}; was the run made with a reference solve?")
    with open(cpath) as fh:
        const = RateConstants.from_dict(json.load(fh))
    with np.load(spath) as z:
        series = {k: z[k] for k in z.files}
    rep = check_rate_bounds(series, const, kmin=args.kmin, kmax=args.kmax)
    out = rep.as_dict()
    print(json.dumps(out, indent=2))
    with open(os.path.join(args.run_dir, "bounds.json"), "w") as fh:
        json.dump(out, fh, indent=2)
    return EXIT_OK if rep.all_pass else EXIT_CHECK


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "validate-weights": cmd_validate_weights,
            "check-bounds": cmd_check_bounds}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, GraphError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CoupledOptError, FloatingPointError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
