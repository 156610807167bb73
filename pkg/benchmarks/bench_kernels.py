"""Time the numba kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--n 200] [--repeat 200]
"""
import argparse
import time

import numpy as np

from coupledopt import _kernels
from coupledopt.algorithm import AlgoParams, init_state, step_stacked
from coupledopt.families import gen_coupled_quadratic
from coupledopt.graph import build_weight_matrices
from coupledopt.problem import lift


def timeit(fn, repeat):
    fn()  # warm-up (jit compile on first call)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench(n, repeat):
    rng = np.random.default_rng(0)
    D = 6
    M = [(lambda G: G.T @ G)(rng.standard_normal((D, D))) for _ in range(n)]
    v = [rng.standard_normal(D) for _ in range(n)]
    qb = _kernels.QuadBlocks(M, v)
    xg = rng.standard_normal(n * D)
    idx = rng.integers(0, n, size=n * D)
    w = rng.standard_normal(n * D)

    pb = gen_coupled_quadratic(n, seed=0)
    lp = lift(pb)
    params = AlgoParams(gamma=0.01, rho=0.8, max_iter=0, wp=build_weight_matrices(pb.graph))
    st = init_state(lp, params)

    cases = {
        "quad_forms": lambda: qb.evaluate(xg),
        "scatter_add": lambda: _kernels.scatter_add(idx, w, n),
        "segment_dot": lambda: _kernels.segment_dot(xg, w, qb.gptr),
        "step_stacked": lambda: step_stacked(lp, st, params),
    }
    rows = {}
    for backend in ("numpy", "numba"):
        if backend == "numba" and not _kernels.HAVE_NUMBA:
            continue
        _kernels.set_backend(backend)
        for name, fn in cases.items():
            rows.setdefault(name, {})[backend] = timeit(fn, repeat)
    print(f"n={n}, repeat={repeat}")
    print(f"{'kernel':<14}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, r in rows.items():
        nb = r.get("numba", np.nan)
        print(f"{name:<14}{r['numpy'] * 1e6:12.1f}{nb * 1e6:12.1f}{r['numpy'] / nb:9.2f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    bench(args.n, args.repeat)
